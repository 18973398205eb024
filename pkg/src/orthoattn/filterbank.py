"""Squeeze filter banks.

A bank holds one flattened filter per channel. With ``group_size`` g each
filter spans g consecutive channels, so filters live in R^(g*H*W).

Kinds:

* ``ortho``  random standard-normal filters made orthonormal with
  Gram-Schmidt. When the filter dimension d is at least C, all C filters are
  orthonormalized together. Otherwise ceil(C / d) independent complete bases
  of R^d are generated and the concatenation is truncated to C filters.
* ``gap``    constant 1/(H*W); the squeeze is global average pooling.
* ``dct``    unnormalized 2-D DCT-II basis tensors, one frequency pair per
  contiguous block of channels.
* ``random`` the raw standard-normal draws, no orthonormalization.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, VersionError
from .tensor import DTYPE, make_rng, randn

KINDS = ("ortho", "gap", "dct", "random")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

ORTHO_TOL = 1e-10
DEGENERATE_TOL = 1e-8
MAX_REDRAWS = 100

MAGIC = b"OFB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBIIIIQI")


class DegenerateFilterError(ArithmeticError):
    """A vector collapsed under projection; the caller should redraw it."""

    def __init__(self, index: int, residual: float):
        super().__init__(f"vector {index} is degenerate (relative residual norm {residual:.3e})")
        self.index = index
        self.residual = residual


class GramSchmidtError(DegenerateFilterError):
    """Redraw budget exhausted."""


@dataclass(frozen=True, eq=False)
class FilterBank:
    kernel: np.ndarray  # (c, group_size * h * w)
    c: int
    h: int
    w: int
    group_size: int = 1
    kind: str = "ortho"
    seed: int = 0
    dct_freqs: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown bank kind {self.kind!r}")
        if min(self.c, self.h, self.w, self.group_size) < 1:
            raise ValueError("bank dimensions must be >= 1")
        if self.c % self.group_size:
            raise ValueError(f"group_size {self.group_size} does not divide C={self.c}")
        if self.kernel.shape != (self.c, self.dim):
            raise ValueError(f"kernel shape {self.kernel.shape} != {(self.c, self.dim)}")

    @property
    def dim(self) -> int:
        return self.group_size * self.h * self.w

    @property
    def spatial(self) -> np.ndarray:
        """Kernel viewed as (C, g, H, W), or (C, H, W) when g == 1."""
        if self.group_size == 1:
            return self.kernel.reshape(self.c, self.h, self.w)
        return self.kernel.reshape(self.c, self.group_size, self.h, self.w)

    def with_kernel(self, kernel: np.ndarray) -> "FilterBank":
        return replace(self, kernel=np.array(kernel, dtype=DTYPE).reshape(self.c, self.dim))

    def equals(self, other: "FilterBank") -> bool:
        """Field-by-field equality with bitwise kernel comparison."""
        return (
            (self.c, self.h, self.w, self.group_size, self.kind, self.seed, self.dct_freqs)
            == (other.c, other.h, other.w, other.group_size, other.kind, other.seed, other.dct_freqs)
            and self.kernel.tobytes() == other.kernel.tobytes()
        )


def gram_schmidt(
    vectors: Sequence[np.ndarray] | np.ndarray,
    redraw: Callable[[int], np.ndarray] | None = None,
    max_redraws: int = MAX_REDRAWS,
) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Parameters
    ----------
    vectors : (m, d) array or sequence of m length-d vectors, m <= d.
    redraw : called with the index of a degenerate vector (relative residual
        norm below 1e-8 after projection) and must return a replacement. When
        omitted, :class:`DegenerateFilterError` is raised instead.
    max_redraws : total redraw budget; exceeding it raises
        :class:`GramSchmidtError`.

    Returns
    -------
    (m, d) array whose rows are orthonormal and span the same subspace as the
    input rows (after any redraws).
    """
    q = np.array(vectors, dtype=DTYPE, copy=True)
    if q.ndim != 2:
        raise ValueError("expected a list of flat vectors")
    m, d = q.shape
    if m > d:
        raise ValueError(f"cannot orthonormalize {m} vectors in R^{d}")
    if not np.all(np.isfinite(q)):
        raise ValueError("vectors must be finite")

    redraws = 0
    k = 0
    while k < m:
        v = q[k].copy()
        norm0 = float(np.linalg.norm(v))
        for _ in range(2):
            for j in range(k):
                v -= np.dot(q[j], v) * q[j]
        norm = float(np.linalg.norm(v))
        residual = norm / norm0 if norm0 > 0 else 0.0
        if residual < DEGENERATE_TOL:
            if redraw is None:
                raise DegenerateFilterError(k, residual)
            if redraws >= max_redraws:
                raise GramSchmidtError(k, residual)
            redraws += 1
            q[k] = np.asarray(redraw(k), dtype=DTYPE).reshape(d)
            continue
        q[k] = v / norm
        k += 1
    return q


def ortho_blocks(c: int, dim: int) -> list[tuple[int, int]]:
    """Channel ranges that were orthonormalized together by build_ortho."""
    if dim >= c:
        return [(0, c)]
    return [(s, min(s + dim, c)) for s in range(0, c, dim)]


def _draw(seed: int, rows: int, dim: int) -> tuple[np.random.Generator, np.ndarray]:
    rng = make_rng(seed)
    return rng, randn(rng, (rows, dim))


def build_ortho(seed: int, c: int, h: int, w: int, group_size: int = 1) -> FilterBank:
    dim = group_size * h * w
    if min(c, h, w, group_size) < 1:
        raise ValueError("bank dimensions must be >= 1")
    if dim >= c:
        n_groups, per_group = 1, c
    else:
        n_groups, per_group = math.ceil(c / dim), dim
    rng, raw = _draw(seed, n_groups * per_group, dim)

    def redraw(_: int) -> np.ndarray:
        return randn(rng, (dim,))

    parts = [gram_schmidt(raw[g * per_group:(g + 1) * per_group], redraw) for g in range(n_groups)]
    kernel = np.concatenate(parts, axis=0)[:c]
    return FilterBank(np.ascontiguousarray(kernel), c, h, w, group_size, "ortho", seed)


def build_random(seed: int, c: int, h: int, w: int, group_size: int = 1) -> FilterBank:
    _, raw = _draw(seed, c, group_size * h * w)
    return FilterBank(raw, c, h, w, group_size, "random", seed)


def build_gap(c: int, h: int, w: int) -> FilterBank:
    kernel = np.full((c, h * w), 1.0 / (h * w), dtype=DTYPE)
    return FilterBank(kernel, c, h, w, 1, "gap", 0)


def dct_basis(i: int, j: int, h: int, w: int) -> np.ndarray:
    """2-D cosine basis tensor cos(pi*i*(a+1/2)/h) * cos(pi*j*(b+1/2)/w), unnormalized."""
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"frequency ({i}, {j}) out of range for {h}x{w}")
    vi = np.cos(np.pi * i * (np.arange(h) + 0.5) / h)
    vj = np.cos(np.pi * j * (np.arange(w) + 0.5) / w)
    return np.outer(vi, vj)


def zigzag_freqs(n: int = 16, grid: int = 7) -> list[tuple[int, int]]:
    """First ``n`` frequency pairs of a JPEG-style zigzag scan over a grid."""
    out = []
    for s in range(2 * grid - 1):
        diag = [(i, s - i) for i in range(grid) if 0 <= s - i < grid]
        if s % 2 == 0:
            diag.reverse()
        out.extend(diag)
    return out[:n]


def dct_block_of(c: int, n_blocks: int) -> np.ndarray:
    """Block index of every channel: contiguous blocks, remainder to the last."""
    size = c // n_blocks
    return np.minimum(np.arange(c) // size, n_blocks - 1)


def build_dct(c: int, h: int, w: int, freqs: Sequence[tuple[int, int]], normalize: bool = False) -> FilterBank:
    freqs = tuple((int(i), int(j)) for i, j in freqs)
    if not freqs:
        raise ValueError("at least one frequency pair is required")
    if len(freqs) > c:
        raise ValueError(f"{len(freqs)} frequency blocks for only {c} channels")
    bases = [dct_basis(i, j, h, w).ravel() for i, j in freqs]
    if normalize:
        bases = [b / np.linalg.norm(b) for b in bases]
    kernel = np.stack([bases[b] for b in dct_block_of(c, len(freqs))])
    return FilterBank(kernel, c, h, w, 1, "dct", 0, freqs)


@dataclass
class OrthoReport:
    blocks: list[tuple[int, int]]
    deviations: list[float]
    tol: float = ORTHO_TOL

    @property
    def max_deviation(self) -> float:
        return max(self.deviations)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol


def check_orthonormality(bank: FilterBank, tol: float = ORTHO_TOL) -> OrthoReport:
    """Max |<F_i, F_j> - delta_ij| over each Gram-Schmidt block."""
    if bank.kind != "ortho":
        raise ValueError(f"wrong kind: expected ortho bank, got {bank.kind}")
    blocks = ortho_blocks(bank.c, bank.dim)
    devs = []
    for s, e in blocks:
        f = bank.kernel[s:e]
        gram = f @ f.T
        devs.append(float(np.max(np.abs(gram - np.eye(e - s)))))
    return OrthoReport(blocks, devs, tol)


@dataclass
class StructureReport:
    kind: str
    passed: bool
    detail: str
    ortho: OrthoReport | None = field(default=None)


def check_structure(bank: FilterBank, expect_kind: str | None = None) -> StructureReport:
    """Validate a bank against the construction rule of its kind."""
    if expect_kind is not None and bank.kind != expect_kind:
        return StructureReport(bank.kind, False, f"expected kind {expect_kind}, file holds {bank.kind}")
    if not np.all(np.isfinite(bank.kernel)):
        return StructureReport(bank.kind, False, "non-finite kernel entries")
    if bank.kind == "ortho":
        rep = check_orthonormality(bank)
        return StructureReport("ortho", rep.passed, f"max Gram deviation {rep.max_deviation:.3e}", rep)
    if bank.kind == "gap":
        ok = bool(np.all(bank.kernel == 1.0 / (bank.h * bank.w)))
        return StructureReport("gap", ok, "constant 1/(H*W)" if ok else "kernel is not constant 1/(H*W)")
    if bank.kind == "dct":
        if not bank.dct_freqs:
            return StructureReport("dct", False, "no frequency list")
        plain = build_dct(bank.c, bank.h, bank.w, bank.dct_freqs)
        normed = build_dct(bank.c, bank.h, bank.w, bank.dct_freqs, normalize=True)
        ok = bool(np.allclose(bank.kernel, plain.kernel, rtol=0, atol=1e-12)
                  or np.allclose(bank.kernel, normed.kernel, rtol=0, atol=1e-12))
        return StructureReport("dct", ok, "matches DCT basis" if ok else "kernel deviates from DCT basis")
    return StructureReport("random", True, "finite kernel")


def bank_to_bytes(bank: FilterBank) -> bytes:
    freqs = bank.dct_freqs or ()
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_CODE[bank.kind], bank.c, bank.h, bank.w,
                        bank.group_size, bank.seed & 0xFFFFFFFFFFFFFFFF, len(freqs))
    body = b"".join(struct.pack("<II", i, j) for i, j in freqs)
    payload = np.ascontiguousarray(bank.kernel, dtype="<f8").tobytes()
    blob = head + body + payload
    return blob + struct.pack("<I", zlib.crc32(blob))


def bank_from_bytes(blob: bytes) -> FilterBank:
    if len(blob) < 4:
        raise TruncatedFileError("truncated: file shorter than magic")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError("truncated: incomplete header")
    _, version, kind, c, h, w, g, seed, nfreqs = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported bank version {version}")
    if kind >= len(KINDS):
        raise FormatError(f"unknown kind code {kind}")
    off = _HEADER.size
    need = off + 8 * nfreqs + 8 * c * g * h * w + 4
    if len(blob) < need:
        raise TruncatedFileError(f"truncated: expected {need} bytes, got {len(blob)}")
    if len(blob) > need:
        raise FormatError(f"trailing data: expected {need} bytes, got {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, need - 4)
    if zlib.crc32(blob[:need - 4]) != crc:
        raise ChecksumError("checksum mismatch")
    freqs = tuple(struct.unpack_from("<II", blob, off + 8 * k) for k in range(nfreqs))
    off += 8 * nfreqs
    kernel = np.frombuffer(blob, dtype="<f8", count=c * g * h * w, offset=off).astype(DTYPE).reshape(c, g * h * w)
    return FilterBank(kernel, c, h, w, g, KINDS[kind], seed, freqs if KINDS[kind] == "dct" else None)


def save_bank(bank: FilterBank, path: str | Path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path: str | Path) -> FilterBank:
    return bank_from_bytes(Path(path).read_bytes())
