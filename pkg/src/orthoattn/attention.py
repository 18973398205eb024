"""Channel attention: squeeze -> excite -> scale, with exact gradients.

Shapes accept a single feature map (C, H, W) or a batch (N, C, H, W).

The squeeze accumulates over the flattened filter dimension in a fixed
left-to-right order, so squeezing with the GAP bank reproduces a
left-to-right spatial mean bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filterbank import FilterBank
from .tensor import DTYPE, make_rng


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _check_bank(bank_c: int, bank_h: int, bank_w: int, x: np.ndarray) -> None:
    if x.shape[1:] != (bank_c, bank_h, bank_w):
        raise ValueError(f"input {x.shape[1:]} does not match bank (C,H,W)=({bank_c},{bank_h},{bank_w})")


def _squeeze(kernel: np.ndarray, g: int, x: np.ndarray) -> np.ndarray:
    n, c = x.shape[:2]
    xf = x.reshape(n, c // g, -1)
    kg = kernel.reshape(c // g, g, -1)
    z = np.zeros((n, c // g, g), dtype=DTYPE)
    for d in range(xf.shape[2]):
        z += kg[None, :, :, d] * xf[:, :, None, d]
    return z.reshape(n, c)


def squeeze_grouped(bank: FilterBank, x: np.ndarray, group_size: int | None = None) -> np.ndarray:
    """Z_c = sum over the g channels k of c's group of <K_c[k], X_k>.

    Channels are partitioned into contiguous groups of g; each filter has
    g*H*W entries. g=1 is the per-channel inner product.
    """
    g = bank.group_size if group_size is None else group_size
    if g != bank.group_size:
        raise ValueError(f"bank was built with group_size {bank.group_size}, not {g}")
    if bank.c % g:
        raise ValueError(f"group size {g} does not divide C={bank.c}")
    xb, single = _batched(x)
    _check_bank(bank.c, bank.h, bank.w, xb)
    z = _squeeze(bank.kernel, g, xb)
    return z[0] if single else z


def squeeze(bank: FilterBank, x: np.ndarray) -> np.ndarray:
    if bank.group_size != 1:
        raise ValueError("squeeze needs a group_size=1 bank; use squeeze_grouped")
    return squeeze_grouped(bank, x, 1)


def sigmoid(s: np.ndarray) -> np.ndarray:
    # split by sign so large |s| never overflows exp
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class GradBundle:
    d_input: np.ndarray
    d_w1: np.ndarray
    d_w2: np.ndarray
    d_bank: np.ndarray | None = None


def hidden_width(c: int, reduction: int) -> int:
    return max(1, c // reduction)


class AttentionBlock:
    """Squeeze with a filter bank, excite with a bias-free 2-layer MLP, scale.

    ``kernel`` is the live (possibly fine-tuned) copy of ``bank.kernel``; the
    bank passed at construction is never modified. Gradients for the kernel
    are produced only while ``filters_learnable`` is set.
    """

    def __init__(self, bank: FilterBank, w1: np.ndarray, w2: np.ndarray, filters_learnable: bool = False):
        w1 = np.array(w1, dtype=DTYPE)
        w2 = np.array(w2, dtype=DTYPE)
        if w1.ndim != 2 or w1.shape[1] != bank.c or w2.shape != (bank.c, w1.shape[0]):
            raise ValueError(f"weights {w1.shape}, {w2.shape} inconsistent with C={bank.c}")
        self.init_bank = bank
        self.kernel = bank.kernel.copy()
        self.w1 = w1
        self.w2 = w2
        self.filters_learnable = filters_learnable
        self._cache: dict | None = None

    @classmethod
    def create(cls, bank: FilterBank, reduction: int = 16, seed: int = 0,
               filters_learnable: bool = False) -> "AttentionBlock":
        """Fan-in uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        if reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        hid = hidden_width(bank.c, reduction)
        rng = make_rng(seed)
        b1 = 1.0 / np.sqrt(bank.c)
        b2 = 1.0 / np.sqrt(hid)
        w1 = rng.uniform(-b1, b1, size=(hid, bank.c))
        w2 = rng.uniform(-b2, b2, size=(bank.c, hid))
        return cls(bank, w1, w2, filters_learnable)

    @property
    def c(self) -> int:
        return self.init_bank.c

    @property
    def bank(self) -> FilterBank:
        """Current filters as a FilterBank."""
        return self.init_bank.with_kernel(self.kernel)

    def squeeze(self, x: np.ndarray) -> np.ndarray:
        return squeeze_grouped(self.bank, x)

    def excite(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=DTYPE)
        single = z.ndim == 1
        zb = z[None] if single else z
        if zb.ndim != 2 or zb.shape[1] != self.c:
            raise ValueError(f"expected squeezed vector of length {self.c}, got shape {z.shape}")
        h_pre = zb @ self.w1.T
        h = np.maximum(h_pre, 0.0)
        a = sigmoid(h @ self.w2.T)
        self._excite_cache = (zb, h_pre, h, a)
        return a[0] if single else a

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xb, single = _batched(x)
        _check_bank(self.c, self.init_bank.h, self.init_bank.w, xb)
        z = _squeeze(self.kernel, self.init_bank.group_size, xb)
        a = self.excite(z)
        y = xb * a[:, :, None, None]
        zb, h_pre, h, _ = self._excite_cache
        self._cache = {"x": xb, "z": zb, "h_pre": h_pre, "h": h, "a": a, "single": single}
        if single:
            return y[0], a[0]
        return y, a

    __call__ = forward

    def backward(self, d_y: np.ndarray) -> GradBundle:
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        cache = self._cache
        x, z, h_pre, h, a = cache["x"], cache["z"], cache["h_pre"], cache["h"], cache["a"]
        dy = np.asarray(d_y, dtype=DTYPE)
        if cache["single"]:
            dy = dy[None]
        if dy.shape != x.shape:
            raise ValueError(f"gradient shape {dy.shape} != forward output {x.shape}")
        n, c = x.shape[:2]
        g = self.init_bank.group_size

        da = np.einsum("nchw,nchw->nc", dy, x)
        ds = da * a * (1.0 - a)
        d_w2 = ds.T @ h
        dh_pre = (ds @ self.w2) * (h_pre > 0)
        d_w1 = dh_pre.T @ z
        dz = dh_pre @ self.w1

        xf = x.reshape(n, c // g, -1)
        kg = self.kernel.reshape(c // g, g, -1)
        dzg = dz.reshape(n, c // g, g)
        dx = dy * a[:, :, None, None] + np.einsum("ngj,gjd->ngd", dzg, kg).reshape(x.shape)
        d_bank = None
        if self.filters_learnable:
            d_bank = np.einsum("ngj,ngd->gjd", dzg, xf).reshape(self.kernel.shape)
        if cache["single"]:
            dx = dx[0]
        return GradBundle(dx, d_w1, d_w2, d_bank)

    def permute_channels(self, perm, permute_bank: bool = True) -> "AttentionBlock":
        """Twin block whose channels are reordered by ``perm``.

        W1 columns and W2 rows are permuted; the bank filters are permuted
        along the channel axis unless ``permute_bank`` is False, which keeps
        the filters as fixed constants attached to channel positions.
        """
        perm = np.asarray(perm)
        if perm.shape != (self.c,) or not np.array_equal(np.sort(perm), np.arange(self.c)):
            raise ValueError(f"not a permutation of 0..{self.c - 1}: {perm.tolist()}")
        if self.init_bank.group_size != 1:
            raise ValueError("channel permutation is defined for group_size=1 banks only")
        kernel = self.kernel[perm] if permute_bank else self.kernel
        init = self.init_bank.kernel[perm] if permute_bank else self.init_bank.kernel
        twin = AttentionBlock(self.init_bank.with_kernel(init), self.w1[:, perm], self.w2[perm, :],
                              self.filters_learnable)
        twin.kernel = kernel.copy()
        return twin

    def param_count(self) -> int:
        n = self.w1.size + self.w2.size
        if self.filters_learnable:
            n += self.kernel.size
        return n
