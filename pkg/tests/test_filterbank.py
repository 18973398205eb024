import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from orthoattn.errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, VersionError
from orthoattn.filterbank import (DegenerateFilterError, FilterBank, GramSchmidtError, bank_from_bytes,
                                  bank_to_bytes, build_dct, build_gap, build_ortho, build_random,
                                  check_orthonormality, check_structure, dct_basis, dct_block_of,
                                  gram_schmidt, load_bank, ortho_blocks, save_bank, zigzag_freqs)
from orthoattn.tensor import make_rng, randn


def gram_dev(f):
    return float(np.max(np.abs(f @ f.T - np.eye(len(f)))))


# ---- gram_schmidt

def test_gs_2d_hand_case():
    q = gram_schmidt([[1.0, 0.0], [1.0, 1.0]])
    assert np.allclose(q, [[1, 0], [0, 1]], atol=1e-15)


def test_gs_normalizes_single_vector():
    assert gram_schmidt([[2.0, 0.0, 0.0]]).tolist() == [[1.0, 0.0, 0.0]]


def test_gs_16_random_matches_qr_subspace():
    v = randn(make_rng(4), (16, 16))
    q = gram_schmidt(v)
    assert gram_dev(q) <= 1e-10
    qr_q, _ = np.linalg.qr(v.T)
    # same flag of subspaces: every leading-k span agrees with QR's
    for k in (1, 5, 16):
        p_gs = q[:k].T @ q[:k]
        p_qr = qr_q[:, :k] @ qr_q[:, :k].T
        assert np.max(np.abs(p_gs - p_qr)) <= 1e-10


def test_gs_ill_conditioned_stays_orthonormal():
    # nearly collinear vectors in R^64: classical GS loses orthogonality here
    base = randn(make_rng(1), (64,))
    v = base + 1e-4 * randn(make_rng(2), (64, 64))
    assert gram_dev(gram_schmidt(v)) <= 1e-10


def test_gs_degenerate_without_redraw_raises():
    with pytest.raises(DegenerateFilterError) as exc:
        gram_schmidt([[1.0, 1.0], [2.0, 2.0]])
    assert exc.value.index == 1


def test_gs_degenerate_redraw_replaces_vector():
    calls = []

    def redraw(k):
        calls.append(k)
        return np.array([0.0, 3.0])

    q = gram_schmidt([[1.0, 1.0], [2.0, 2.0]], redraw)
    assert calls == [1]
    assert gram_dev(q) <= 1e-15
    assert np.allclose(q[0], [1 / math.sqrt(2)] * 2)


def test_gs_redraw_budget_exhausted():
    with pytest.raises(GramSchmidtError):
        gram_schmidt([[1.0, 0.0], [1.0, 0.0]], lambda k: np.array([5.0, 0.0]), max_redraws=100)


def test_gs_zero_vector_is_degenerate():
    with pytest.raises(DegenerateFilterError):
        gram_schmidt([[0.0, 0.0, 0.0]])


def test_gs_rejects_overfull_and_nonfinite():
    with pytest.raises(ValueError):
        gram_schmidt(np.ones((3, 2)))
    with pytest.raises(ValueError):
        gram_schmidt([[np.nan, 1.0]])


@given(st.integers(1, 12), st.integers(0, 12), st.integers(0, 2**32 - 1))
def test_gs_property_orthonormal_same_span(d, extra, seed):
    m = max(1, d - extra)
    v = randn(make_rng(seed), (m, d))
    q = gram_schmidt(v, lambda k: randn(make_rng(seed + k + 1), (d,)))
    assert gram_dev(q) <= 1e-10
    # each input row lies in the span of q (no redraw can happen for generic draws)
    if np.linalg.matrix_rank(v) == m:
        resid = v - (v @ q.T) @ q
        assert np.max(np.abs(resid)) <= 1e-9 * max(1.0, np.max(np.abs(v)))


# ---- build_ortho

def test_ortho_boundary_hw_equals_c():
    bank = build_ortho(0, 4, 2, 2)
    assert bank.kernel.shape == (4, 4)
    assert gram_dev(bank.kernel) <= 1e-10
    assert np.linalg.svd(bank.kernel, compute_uv=False).min() > 0.99


def test_ortho_two_groups():
    bank = build_ortho(1, 8, 2, 2)
    assert ortho_blocks(8, 4) == [(0, 4), (4, 8)]
    assert gram_dev(bank.kernel[:4]) <= 1e-10
    assert gram_dev(bank.kernel[4:]) <= 1e-10
    # the concatenation is not orthonormal (8 vectors in R^4)
    assert gram_dev(bank.kernel) > 0.1


def test_ortho_fewer_filters_than_dim():
    bank = build_ortho(2, 3, 4, 4)
    assert bank.kernel.shape == (3, 16)
    assert gram_dev(bank.kernel) <= 1e-10


def test_ortho_truncates_partial_group():
    bank = build_ortho(3, 10, 2, 2)
    assert bank.kernel.shape == (10, 4)
    blocks = ortho_blocks(10, 4)
    assert blocks == [(0, 4), (4, 8), (8, 10)]
    for s, e in blocks:
        assert gram_dev(bank.kernel[s:e]) <= 1e-10


def test_ortho_each_full_group_spans():
    bank = build_ortho(5, 12, 2, 3)
    for s, e in ortho_blocks(12, 6):
        assert np.linalg.svd(bank.kernel[s:e], compute_uv=False).min() > 0.99


def test_ortho_deterministic_bitwise():
    assert build_ortho(42, 16, 3, 3).equals(build_ortho(42, 16, 3, 3))
    assert not build_ortho(42, 16, 3, 3).equals(build_ortho(43, 16, 3, 3))


def test_ortho_grouped_filters():
    bank = build_ortho(6, 8, 2, 2, group_size=2)
    assert bank.kernel.shape == (8, 8)
    assert gram_dev(bank.kernel) <= 1e-10


def test_ortho_records_seed_and_kind():
    bank = build_ortho(77, 2, 1, 2)
    assert (bank.kind, bank.seed) == ("ortho", 77)


@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**63 - 1))
def test_ortho_property_every_group(c, h, w, seed):
    bank = build_ortho(seed, c, h, w)
    rep = check_orthonormality(bank)
    assert rep.passed and rep.max_deviation <= 1e-10
    assert len(rep.blocks) == (1 if h * w >= c else math.ceil(c / (h * w)))


# ---- build_random

def test_random_matches_prefix_of_ortho_draws():
    c, h, w, seed = 6, 2, 3, 11
    raw = randn(make_rng(seed), (c, h * w))
    assert np.array_equal(build_random(seed, c, h, w).kernel, raw)
    # ortho starts from the same draws: the first filter is the normalized first draw
    assert np.allclose(build_ortho(seed, c, h, w).kernel[0], raw[0] / np.linalg.norm(raw[0]), atol=1e-15)


def test_random_generic_not_orthogonal():
    for seed in range(20):
        k = build_random(seed, 4, 2, 2).kernel
        off = np.abs(k @ k.T - np.diag(np.diag(k @ k.T)))
        assert off.max() > 1e-3


def test_random_single_filter():
    bank = build_random(0, 1, 3, 3)
    assert bank.kernel.shape == (1, 9) and check_structure(bank).passed


# ---- gap

def test_gap_entries():
    assert np.all(build_gap(1, 2, 2).kernel == 0.25)
    assert np.all(build_gap(3, 1, 1).kernel == 1.0)
    assert check_structure(build_gap(5, 3, 7)).passed


# ---- dct

def test_dct_zero_frequency_all_ones():
    for h, w in [(1, 1), (3, 5), (7, 7)]:
        assert np.array_equal(dct_basis(0, 0, h, w), np.ones((h, w)))


def test_dct_hand_value():
    v = dct_basis(1, 0, 2, 1).ravel()
    assert np.allclose(v, [math.sqrt(2) / 2, -math.sqrt(2) / 2], atol=1e-15)


def test_dct_basis_out_of_range():
    with pytest.raises(ValueError):
        dct_basis(2, 0, 2, 2)
    with pytest.raises(ValueError):
        dct_basis(0, -1, 2, 2)


def direct_basis(i, j, h, w):
    out = np.empty((h, w))
    for a in range(h):
        for b in range(w):
            out[a, b] = math.cos(math.pi * i * (a + 0.5) / h) * math.cos(math.pi * j * (b + 0.5) / w)
    return out


def test_dct_8x8_pairwise_orthogonal_and_matches_direct():
    pairs = [(i, j) for i in range(8) for j in range(8)]
    bases = {p: dct_basis(*p, 8, 8) for p in pairs}
    for p in pairs:
        assert np.max(np.abs(bases[p] - direct_basis(*p, 8, 8))) <= 1e-14
    worst = 0.0
    for a in range(len(pairs)):
        for b in range(a + 1, len(pairs)):
            s = 0.0
            for x, y in zip(bases[pairs[a]].ravel(), bases[pairs[b]].ravel()):
                s += x * y
            worst = max(worst, abs(s))
    assert worst <= 1e-10


@pytest.mark.parametrize("h,w", [(2, 2), (3, 5), (7, 7), (8, 4)])
def test_dct_nonzero_frequency_sums_to_zero(h, w):
    for i in range(h):
        for j in range(w):
            if (i, j) != (0, 0):
                assert abs(sum(dct_basis(i, j, h, w).ravel().tolist())) <= 1e-9


def test_build_dct_blocking_rule():
    bank = build_dct(4, 3, 3, [(0, 0)])
    assert np.all(bank.kernel == 1.0)
    bank = build_dct(4, 3, 3, [(0, 0), (0, 1)])
    assert np.array_equal(bank.kernel[1], dct_basis(0, 0, 3, 3).ravel())
    assert np.array_equal(bank.kernel[2], dct_basis(0, 1, 3, 3).ravel())
    assert dct_block_of(7, 3).tolist() == [0, 0, 1, 1, 2, 2, 2]


def test_build_dct_sixteen_distinct():
    freqs = zigzag_freqs(16, 7)
    assert len(set(freqs)) == 16 and freqs[:4] == [(0, 0), (0, 1), (1, 0), (2, 0)]
    bank = build_dct(16, 7, 7, freqs)
    assert len({bank.kernel[c].tobytes() for c in range(16)}) == 16
    for c, (i, j) in enumerate(freqs):
        assert np.array_equal(bank.spatial[c], dct_basis(i, j, 7, 7))


def test_build_dct_errors():
    with pytest.raises(ValueError):
        build_dct(4, 2, 2, [])
    with pytest.raises(ValueError):
        build_dct(4, 2, 2, [(2, 0)])
    with pytest.raises(ValueError):
        build_dct(1, 2, 2, [(0, 0), (0, 1)])


def test_build_dct_normalized_flag():
    bank = build_dct(3, 4, 4, [(0, 0), (1, 2)], normalize=True)
    assert np.allclose(np.linalg.norm(bank.kernel, axis=1), 1.0, atol=1e-15)
    assert check_structure(bank).passed


# ---- validation

def test_check_orthonormality_fresh_and_faulty():
    bank = build_ortho(0, 4, 2, 2)
    rep = check_orthonormality(bank)
    assert rep.passed and rep.max_deviation <= 1e-10
    k = bank.kernel.copy()
    k[2] *= 2
    bad = check_orthonormality(bank.with_kernel(k))
    assert not bad.passed
    assert abs(bad.max_deviation - 3.0) <= 1e-9


def test_check_orthonormality_wrong_kind():
    with pytest.raises(ValueError, match="wrong kind"):
        check_orthonormality(build_gap(2, 2, 2))


def test_check_structure_detects_tampering():
    gap = build_gap(2, 2, 2)
    k = gap.kernel.copy()
    k[0, 0] = 0.3
    assert not check_structure(gap.with_kernel(k)).passed
    dct = build_dct(2, 2, 2, [(0, 1)])
    assert not check_structure(dct.with_kernel(dct.kernel * 1.5)).passed
    assert not check_structure(gap, expect_kind="ortho").passed


def test_filterbank_validates_fields():
    with pytest.raises(ValueError):
        FilterBank(np.zeros((2, 4)), 2, 2, 2, kind="nope")
    with pytest.raises(ValueError):
        FilterBank(np.zeros((3, 8)), 3, 2, 2, group_size=2)
    with pytest.raises(ValueError):
        FilterBank(np.zeros((2, 5)), 2, 2, 2)


# ---- OFB1 files

BANKS = [
    lambda: build_ortho(7, 8, 2, 2),
    lambda: build_ortho(8, 6, 2, 2, group_size=3),
    lambda: build_gap(3, 4, 5),
    lambda: build_dct(5, 4, 4, [(0, 0), (1, 3)]),
    lambda: build_random(2**63 + 5, 2, 3, 1),
]


@pytest.mark.parametrize("make", BANKS)
def test_bank_roundtrip_bitwise(make, tmp_path):
    bank = make()
    path = tmp_path / "b.ofb"
    save_bank(bank, path)
    back = load_bank(path)
    assert back.equals(bank)
    assert bank_to_bytes(back) == path.read_bytes()


def test_bank_header_layout():
    blob = bank_to_bytes(build_dct(2, 3, 3, [(1, 2)]))
    magic, version, kind, c, h, w, g, seed, nf = struct.unpack_from("<4sIBIIIIQI", blob)
    assert (magic, version, kind, c, h, w, g, seed, nf) == (b"OFB1", 1, 2, 2, 3, 3, 1, 0, 1)
    assert struct.unpack_from("<II", blob, 37) == (1, 2)
    assert len(blob) == 37 + 8 + 2 * 9 * 8 + 4
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_bank_bad_magic():
    blob = bytearray(bank_to_bytes(build_gap(1, 2, 2)))
    blob[0:4] = b"XFB1"
    with pytest.raises(BadMagicError, match="bad magic"):
        bank_from_bytes(bytes(blob))


@pytest.mark.parametrize("cut", [0, 2, 20, 40, -5])
def test_bank_truncated(cut):
    blob = bank_to_bytes(build_ortho(0, 4, 2, 2))
    with pytest.raises(TruncatedFileError, match="truncated"):
        bank_from_bytes(blob[:cut])


def test_bank_crc_mismatch():
    blob = bytearray(bank_to_bytes(build_ortho(0, 4, 2, 2)))
    blob[50] ^= 0x01
    with pytest.raises(ChecksumError):
        bank_from_bytes(bytes(blob))


def test_bank_version_mismatch():
    blob = bytearray(bank_to_bytes(build_gap(1, 1, 1)))
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        bank_from_bytes(bytes(blob))


def test_bank_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        bank_from_bytes(bank_to_bytes(build_gap(1, 1, 1)) + b"\0")


@given(st.integers(1, 9), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**64 - 1),
       st.sampled_from(["ortho", "random", "gap"]))
def test_bank_roundtrip_property(c, h, w, seed, kind):
    bank = {"ortho": lambda: build_ortho(seed, c, h, w), "random": lambda: build_random(seed, c, h, w),
            "gap": lambda: build_gap(c, h, w)}[kind]()
    assert bank_from_bytes(bank_to_bytes(bank)).equals(bank)
