"""Central finite-difference checks of the analytic backward passes.

Relative error per component is |a - n| / max(|a|, |n|, floor). The floor
(1e-3) covers the truncation and round-off error of central differences at
eps=1e-5, about 1e-10 absolute, so near-zero components are compared at an
absolute 1e-9.

ReLU kinks: a difference whose +-eps evaluations change the sign pattern of
any ReLU input is not a derivative estimate. Network checks detect this and
skip (or, when sampling, resample) such coordinates; the count is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import AttentionBlock
from .backbone import Network, preset
from .filterbank import build_dct, build_gap, build_ortho, build_random, zigzag_freqs
from .tensor import make_rng
from .train import ce_label_smoothing

REL_FLOOR = 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / den


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of f() w.r.t. entries of ``arr`` (perturbed in place, then restored).

    Returns a full-shape array; entries outside ``indices`` are NaN.
    """
    out = np.full(arr.shape, np.nan)
    for i in (np.ndindex(arr.shape) if indices is None else indices):
        orig = arr[i]
        arr[i] = orig + eps
        fp = f()
        arr[i] = orig - eps
        fm = f()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)  # name -> max rel err
    checked: int = 0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def add(self, name: str, analytic: np.ndarray, numeric: np.ndarray) -> None:
        mask = ~np.isnan(numeric)
        err = float(np.max(rel_error(analytic[mask], numeric[mask]), initial=0.0))
        self.errors[name] = max(err, self.errors.get(name, 0.0))
        self.checked += int(mask.sum())

    def merge(self, other: "GradReport", prefix: str = "") -> None:
        for k, v in other.errors.items():
            self.errors[prefix + k] = max(v, self.errors.get(prefix + k, 0.0))
        self.checked += other.checked
        self.skipped += other.skipped


def _random_bank(rng: np.random.Generator, kind: str, c: int, h: int, w: int, seed: int):
    if kind == "ortho":
        return build_ortho(seed, c, h, w)
    if kind == "random":
        return build_random(seed, c, h, w)
    if kind == "dct":
        n = int(rng.integers(1, min(c, h * w) + 1))
        freqs = [(i, j) for i, j in zigzag_freqs(h * w, max(h, w)) if i < h and j < w][:n]
        return build_dct(c, h, w, freqs)
    return build_gap(c, h, w)


def check_attention_instance(block: AttentionBlock, x: np.ndarray, upstream: np.ndarray,
                             eps: float = 1e-5) -> GradReport:
    """Gradcheck of L = sum(forward(x) * upstream) for one block and input."""
    x = x.copy()

    def loss() -> float:
        return float(np.sum(block.forward(x)[0] * upstream))

    loss()
    g = block.backward(upstream)
    rep = GradReport()
    rep.add("input", g.d_input, numeric_grad(loss, x, eps))
    rep.add("w1", g.d_w1, numeric_grad(loss, block.w1, eps))
    rep.add("w2", g.d_w2, numeric_grad(loss, block.w2, eps))
    if block.filters_learnable:
        rep.add("bank", g.d_bank, numeric_grad(loss, block.kernel, eps))
    return rep


def check_attention(seed: int = 0, trials: int = 100, eps: float = 1e-5, kink_margin: float = 1e-3) -> GradReport:
    """Random small blocks: C <= 8, H, W <= 4, every squeeze kind, learnable filters.

    Inputs whose excitation pre-activations fall within ``kink_margin`` of the
    ReLU kink are redrawn, so finite differences never straddle it.
    """
    rng = make_rng(seed)
    kinds = ("ortho", "gap", "dct", "random")
    report = GradReport()
    for t in range(trials):
        c, h, w = (int(v) for v in rng.integers(1, [9, 5, 5]))
        bank = _random_bank(rng, kinds[t % 4], c, h, w, int(rng.integers(0, 2**32)))
        block = AttentionBlock.create(bank, int(rng.integers(1, 5)), int(rng.integers(0, 2**32)),
                                      filters_learnable=True)
        n = int(rng.integers(1, 3))
        while True:
            x = rng.standard_normal((n, c, h, w))
            block.forward(x)
            if np.min(np.abs(block._cache["h_pre"])) > kink_margin:
                break
        report.merge(check_attention_instance(block, x, rng.standard_normal(x.shape), eps))
    return report


def check_network(net: Network, x: np.ndarray, y: np.ndarray, eps: float = 1e-5,
                  max_per_param: int | None = None, seed: int = 0, smoothing: float = 0.1) -> GradReport:
    """Gradcheck of the label-smoothed cross-entropy of a whole network.

    Batch-norm runs in training mode without touching running statistics.
    With ``max_per_param`` only that many randomly chosen entries of each
    parameter tensor are differenced.
    """
    def loss() -> tuple[float, np.ndarray]:
        val = ce_label_smoothing(net.forward(x, training=True, update_stats=False), y, smoothing)[0]
        return val, net.relu_pattern()

    _, d = ce_label_smoothing(net.forward(x, training=True, update_stats=False), y, smoothing)
    base = net.relu_pattern()
    net.backward(d)
    rng = make_rng(seed)
    rep = GradReport()
    for name, p in net.named_params():
        arr = p.value
        if max_per_param is None or arr.size <= max_per_param:
            order, want = np.arange(arr.size), arr.size
        else:
            order, want = rng.permutation(arr.size), max_per_param
        numeric = np.full(arr.shape, np.nan)
        done = 0
        for flat in order:
            if done == want:
                break
            i = np.unravel_index(flat, arr.shape)
            orig = arr[i]
            arr[i] = orig + eps
            fp, pp = loss()
            arr[i] = orig - eps
            fm, pm = loss()
            arr[i] = orig
            if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
                rep.skipped += 1
                continue
            numeric[i] = (fp - fm) / (2 * eps)
            done += 1
        rep.add(name, p.grad, numeric)
    return rep


GRADCHECK_PRESETS = ("attention", "toy34", "toy50", "tiny34", "tiny50")


def run_preset(name: str, seed: int = 0, eps: float = 1e-5) -> GradReport:
    """Gradient checks used by the CLI.

    attention  100 random attention blocks, all parameters
    toy34/50   full check of every parameter of a two-block 8x8 network
    tiny34/50  32x32 desk presets, 12 sampled entries per parameter tensor
    """
    if name == "attention":
        return check_attention(seed, 100, eps)
    if name not in GRADCHECK_PRESETS:
        raise KeyError(f"unknown gradcheck preset {name!r}")
    placement = "mod" if name.endswith("50") else "standard"
    spec = preset(name, attention=placement, kind="ortho", classes=3, reduction=2, filters_learnable=True)
    net = Network(spec, seed)
    rng = make_rng(seed)
    n = 4 if name.startswith("toy") else 2
    x = rng.standard_normal((n, spec.in_channels, *spec.input_hw))
    y = rng.integers(0, spec.classes, size=n)
    return check_network(net, x, y, eps, None if name.startswith("toy") else 12, seed)
