"""Desk-scale residual backbones with pluggable channel attention.

Everything is NCHW float64 with hand-written backward passes. Layers keep
their parameters in :class:`Param` objects; SGD updates ``Param.value`` in
place, so arrays shared with an :class:`AttentionBlock` stay in sync.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from .attention import AttentionBlock, hidden_width
from .filterbank import FilterBank, build_dct, build_gap, build_ortho, build_random, zigzag_freqs
from .tensor import DTYPE, STREAM_BANKS, STREAM_INIT, derive_seed, make_rng

BLOCK_KINDS = ("basic", "bottleneck")
PLACEMENTS = ("none", "standard", "mod")
EXPANSION = 4


# ---------------------------------------------------------------- primitives

def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Columns laid out (C*k*k, N*Ho*Wo), filled one kernel tap at a time."""
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if k == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride] if stride != 1 else x
        return xs.transpose(1, 0, 2, 3).reshape(c, n * ho * wo), ho, wo
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _check_conv(x: np.ndarray, weights: np.ndarray, pad: int) -> None:
    if x.ndim != 4 or weights.ndim != 4 or weights.shape[1] != x.shape[1] or weights.shape[2] != weights.shape[3]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weights {weights.shape}")
    k = weights.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ValueError(f"kernel {k} larger than padded input {x.shape[2:]}")


def _conv_cols(x, weights, stride, pad):
    _check_conv(x, weights, pad)
    f = weights.shape[0]
    cols, ho, wo = _im2col(x, weights.shape[2], stride, pad)
    out = weights.reshape(f, -1) @ cols
    return np.ascontiguousarray(out.reshape(f, x.shape[0], ho, wo).transpose(1, 0, 2, 3)), cols


def conv2d(x: np.ndarray, weights: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of (N,C,H,W) input with (F,C,k,k) weights, zero padding."""
    return _conv_cols(x, weights, stride, pad)[0]


def _conv_backward_cols(d_out, x_shape, cols, weights, stride, pad):
    n, c, h, w = x_shape
    f, _, k, _ = weights.shape
    ho, wo = d_out.shape[2:]
    d2 = d_out.transpose(1, 0, 2, 3).reshape(f, -1)
    d_w = (d2 @ cols.T).reshape(weights.shape)
    if k == 1 and pad == 0:
        dxt = np.zeros((c, n, h, w))
        dxt[:, :, ::stride, ::stride] = (weights.reshape(f, c).T @ d2).reshape(c, n, ho, wo)
        return np.ascontiguousarray(dxt.transpose(1, 0, 2, 3)), d_w
    # full correlation of the zero-dilated output gradient with the flipped kernel
    if stride > 1:
        dd = np.zeros((n, f, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        dd[:, :, ::stride, ::stride] = d_out
    else:
        dd = d_out
    full, _ = _conv_cols(dd, weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), 1, k - 1)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    dxp[:, :, :full.shape[2], :full.shape[3]] = full
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w]), d_w


def conv2d_backward(d_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    stride: int = 1, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d_x, d_weights) of conv2d given d_out."""
    _check_conv(x, weights, pad)
    cols, _, _ = _im2col(x, weights.shape[2], stride, pad)
    return _conv_backward_cols(d_out, x.shape, cols, weights, stride, pad)


@dataclass(eq=False)
class Param:
    value: np.ndarray
    group: str  # weight | norm | bias | bank
    grad: np.ndarray | None = None


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, pad: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (in_ch * k * k))
        self.weight = Param(rng.standard_normal((out_ch, in_ch, k, k)) * std, "weight")
        self.stride, self.pad = stride, pad

    def forward(self, x):
        out, self._cols = _conv_cols(x, self.weight.value, self.stride, self.pad)
        self._x_shape = x.shape
        return out

    def backward(self, d):
        dx, dw = _conv_backward_cols(d, self._x_shape, self._cols, self.weight.value, self.stride, self.pad)
        self.weight.grad = dw
        return dx

    def params(self):
        yield "weight", self.weight


class BatchNorm2d:
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(c), "norm")
        self.beta = Param(np.zeros(c), "norm")
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.momentum, self.eps = momentum, eps

    def forward(self, x, training: bool, update_stats: bool = True):
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                m = x.size // x.shape[1]
                unbiased = var * m / max(m - 1, 1)
                self.running_mean *= 1 - self.momentum
                self.running_mean += self.momentum * mean
                self.running_var *= 1 - self.momentum
                self.running_var += self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, training)
        return xhat * self.gamma.value[None, :, None, None] + self.beta.value[None, :, None, None]

    def backward(self, d):
        xhat, inv, training = self._cache
        self.gamma.grad = np.sum(d * xhat, axis=(0, 2, 3))
        self.beta.grad = np.sum(d, axis=(0, 2, 3))
        dxhat = d * self.gamma.value[None, :, None, None]
        if not training:
            return dxhat * inv[None, :, None, None]
        m = d.size // d.shape[1]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        b = 1.0 / np.sqrt(fan_in)
        self.weight = Param(rng.uniform(-b, b, size=(fan_out, fan_in)), "weight")
        self.bias = Param(np.zeros(fan_out), "bias")

    def forward(self, x):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, d):
        self.weight.grad = d.T @ self._x
        self.bias.grad = d.sum(axis=0)
        return d @ self.weight.value

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias


class Attention:
    """Network adapter around AttentionBlock exposing Params."""

    def __init__(self, block: AttentionBlock):
        self.block = block
        self.w1 = Param(block.w1, "weight")
        self.w2 = Param(block.w2, "weight")
        self.kernel = Param(block.kernel, "bank")

    def forward(self, x):
        return self.block.forward(x)[0]

    def backward(self, d):
        g = self.block.backward(d)
        self.w1.grad, self.w2.grad, self.kernel.grad = g.d_w1, g.d_w2, g.d_bank
        return g.d_input

    def params(self):
        yield "w1", self.w1
        yield "w2", self.w2
        if self.block.filters_learnable:
            yield "kernel", self.kernel

    def all_params(self):
        yield "w1", self.w1
        yield "w2", self.w2
        yield "kernel", self.kernel


def _relu_backward(d, out):
    return d * (out > 0)


# ---------------------------------------------------------------- specs

@dataclass
class AttentionConfig:
    kind: str = "ortho"
    reduction: int = 16
    group_size: int = 1
    seed: int | None = None  # None: derived from the network seed
    filters_learnable: bool = False
    mod_before_activation: bool = False
    dct_normalize: bool = False


@dataclass
class BlockSpec:
    kind: str
    in_ch: int
    out_ch: int
    stride: int = 1
    attention: str = "standard"
    squeeze_kind: str | None = None  # None: network attention kind

    @property
    def mid_ch(self) -> int:
        return self.out_ch // EXPANSION if self.kind == "bottleneck" else self.out_ch

    def validate(self) -> None:
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.attention not in PLACEMENTS:
            raise ValueError(f"unknown attention placement {self.attention!r}")
        if self.attention == "mod" and self.kind != "bottleneck":
            raise ValueError("mod placement is only defined for bottleneck blocks")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if min(self.in_ch, self.out_ch) < 1:
            raise ValueError("channel counts must be positive")
        if self.kind == "bottleneck" and (self.out_ch % EXPANSION or self.mid_ch < 1):
            raise ValueError(f"bottleneck out_ch must be a positive multiple of {EXPANSION}")


@dataclass
class NetworkSpec:
    stages: list[tuple[BlockSpec, int]]
    stem_channels: int
    input_hw: tuple[int, int] = (32, 32)
    in_channels: int = 1
    classes: int = 10
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def blocks(self) -> list[BlockSpec]:
        """Expanded per-block specs: repeats chain out_ch -> out_ch at stride 1."""
        out = []
        for first, repeat in self.stages:
            out.append(first)
            for _ in range(repeat - 1):
                out.append(replace(first, in_ch=first.out_ch, stride=1))
        return out

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("network needs at least one stage")
        ch = self.stem_channels
        for first, repeat in self.stages:
            first.validate()
            if repeat < 1:
                raise ValueError("stage repeat count must be >= 1")
            if first.in_ch != ch:
                raise ValueError(f"stage input {first.in_ch} does not chain from previous width {ch}")
            ch = first.out_ch
        if self.classes < 1 or self.in_channels < 1 or min(self.input_hw) < 1:
            raise ValueError("classes, in_channels and input size must be positive")

    def to_dict(self) -> dict:
        return {
            "stages": [{"block": asdict(b), "repeat": r} for b, r in self.stages],
            "stem_channels": self.stem_channels,
            "input_hw": list(self.input_hw),
            "in_channels": self.in_channels,
            "classes": self.classes,
            "attention": asdict(self.attention),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        spec = cls(
            stages=[(BlockSpec(**s["block"]), int(s["repeat"])) for s in d["stages"]],
            stem_channels=int(d["stem_channels"]),
            input_hw=tuple(d.get("input_hw", (32, 32))),
            in_channels=int(d.get("in_channels", 1)),
            classes=int(d.get("classes", 10)),
            attention=AttentionConfig(**d.get("attention", {})),
        )
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def _stages(kind, widths, repeats, placement, first_stride=1):
    stages, prev = [], None
    for i, (wd, rep) in enumerate(zip(widths, repeats)):
        stages.append((BlockSpec(kind, prev if prev is not None else 0, wd, first_stride if i == 0 else 2, placement), rep))
        prev = wd
    return stages


def preset(name: str, attention: str = "standard", kind: str = "ortho", classes: int = 10,
           **att_kwargs) -> NetworkSpec:
    """Named desk-scale configurations.

    tiny34  basic blocks, stages [2,2,2], widths [8,16,32], 32x32 input
    tiny50  bottlenecks, stages [2,2,2], widths [16,32,64], 32x32 input
    toy34   basic blocks, stages [1,1], widths [4,8], 8x8 input (gradient checks)
    toy50   bottlenecks, stages [1,1], widths [8,16], 8x8 input (gradient checks)
    """
    table = {
        "tiny34": ("basic", 8, [8, 16, 32], [2, 2, 2], (32, 32)),
        "tiny50": ("bottleneck", 16, [16, 32, 64], [2, 2, 2], (32, 32)),
        "toy34": ("basic", 4, [4, 8], [1, 1], (8, 8)),
        "toy50": ("bottleneck", 8, [8, 16], [1, 1], (8, 8)),
    }
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(table)}")
    bkind, stem, widths, repeats, hw = table[name]
    if attention == "mod" and bkind == "basic":
        attention = "standard"
    stages = _stages(bkind, widths, repeats, attention)
    first, rep = stages[0]
    stages[0] = (replace(first, in_ch=stem), rep)
    spec = NetworkSpec(stages, stem, hw, 1, classes, AttentionConfig(kind=kind, **att_kwargs))
    spec.validate()
    return spec


PRESETS = ("tiny34", "tiny50", "toy34", "toy50")


# ---------------------------------------------------------------- blocks

def make_bank(kind: str, c: int, h: int, w: int, seed: int, group_size: int = 1,
              dct_normalize: bool = False) -> FilterBank:
    if kind == "ortho":
        return build_ortho(seed, c, h, w, group_size)
    if kind == "random":
        return build_random(seed, c, h, w, group_size)
    if group_size != 1:
        raise ValueError(f"group_size > 1 is only supported for ortho and random banks, not {kind}")
    if kind == "gap":
        return build_gap(c, h, w)
    if kind == "dct":
        return build_dct(c, h, w, network_dct_freqs(c, h, w), normalize=dct_normalize)
    raise ValueError(f"unknown squeeze kind {kind!r}")


def network_dct_freqs(c: int, h: int, w: int, n: int = 16, grid: int = 7) -> list[tuple[int, int]]:
    """Zigzag frequencies on a 7x7 grid, rescaled to an HxW feature, at most C of them."""
    return [(i * h // grid, j * w // grid) for i, j in zigzag_freqs(min(n, c), grid)]


class Block:
    """Residual block: conv stack -> attention scale -> add shortcut -> ReLU."""

    def __init__(self, spec: BlockSpec, hw: tuple[int, int], att: AttentionConfig,
                 init_seed: int, bank_seed: int):
        spec.validate()
        self.spec = spec
        rng = make_rng(init_seed)
        s = spec.stride
        self.out_hw = (conv_out_size(hw[0], 3, s, 1), conv_out_size(hw[1], 3, s, 1))
        if spec.kind == "basic":
            self.convs = [Conv2d(spec.in_ch, spec.out_ch, 3, s, 1, rng), Conv2d(spec.out_ch, spec.out_ch, 3, 1, 1, rng)]
            self.bns = [BatchNorm2d(spec.out_ch), BatchNorm2d(spec.out_ch)]
        else:
            m = spec.mid_ch
            self.convs = [Conv2d(spec.in_ch, m, 1, 1, 0, rng), Conv2d(m, m, 3, s, 1, rng), Conv2d(m, spec.out_ch, 1, 1, 0, rng)]
            self.bns = [BatchNorm2d(m), BatchNorm2d(m), BatchNorm2d(spec.out_ch)]
        self.shortcut = None
        if s != 1 or spec.in_ch != spec.out_ch:
            self.shortcut = (Conv2d(spec.in_ch, spec.out_ch, 1, s, 0, rng), BatchNorm2d(spec.out_ch))
        self.attention = None
        self.mod_before_activation = att.mod_before_activation
        if spec.attention != "none":
            c = spec.mid_ch if spec.attention == "mod" else spec.out_ch
            bank = make_bank(spec.squeeze_kind or att.kind, c, *self.out_hw, bank_seed, att.group_size, att.dct_normalize)
            blk = AttentionBlock.create(bank, att.reduction, derive_seed(init_seed, 1), att.filters_learnable)
            self.attention = Attention(blk)

    # index of the conv after which attention sits
    @property
    def _att_after(self) -> int:
        if self.attention is None:
            return -1
        return 1 if self.spec.attention == "mod" else len(self.convs) - 1

    def forward(self, x, training: bool, update_stats: bool = True):
        self._acts = []
        out = x
        last = len(self.convs) - 1
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out = bn.forward(conv.forward(out), training, update_stats)
            pre_att = i == self._att_after and (i == last or self.mod_before_activation)
            if pre_att:
                out = self.attention.forward(out)
            if i < last:
                out = np.maximum(out, 0.0)
                self._acts.append(out)
            if i == self._att_after and not pre_att:
                out = self.attention.forward(out)
        if self.shortcut is not None:
            sc = self.shortcut[1].forward(self.shortcut[0].forward(x), training, update_stats)
        else:
            sc = x
        self._out = np.maximum(out + sc, 0.0)
        return self._out

    def backward(self, d):
        d = _relu_backward(d, self._out)
        d_sc = d
        last = len(self.convs) - 1
        for i in range(last, -1, -1):
            pre_att = i == self._att_after and (i == last or self.mod_before_activation)
            if i == self._att_after and not pre_att:
                d = self.attention.backward(d)
            if i < last:
                d = _relu_backward(d, self._acts[i])
            if pre_att:
                d = self.attention.backward(d)
            d = self.convs[i].backward(self.bns[i].backward(d))
        if self.shortcut is not None:
            d_sc = self.shortcut[0].backward(self.shortcut[1].backward(d_sc))
        return d + d_sc

    def modules(self) -> Iterator[tuple[str, object]]:
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            yield f"conv{i + 1}", conv
            yield f"bn{i + 1}", bn
        if self.shortcut is not None:
            yield "shortcut.conv", self.shortcut[0]
            yield "shortcut.bn", self.shortcut[1]
        if self.attention is not None:
            yield "attention", self.attention


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = seed
        att = spec.attention
        bank_root = seed if att.seed is None else att.seed
        rng = make_rng(derive_seed(seed, STREAM_INIT, 0))
        self.stem = Conv2d(spec.in_channels, spec.stem_channels, 3, 1, 1, rng)
        self.stem_bn = BatchNorm2d(spec.stem_channels)
        hw = tuple(spec.input_hw)
        self.blocks = []
        self.stage_shapes = []
        for i, bspec in enumerate(spec.blocks()):
            blk = Block(bspec, hw, att, derive_seed(seed, STREAM_INIT, i + 1), derive_seed(bank_root, STREAM_BANKS, i))
            self.blocks.append(blk)
            hw = blk.out_hw
            self.stage_shapes.append((bspec.out_ch, *hw))
        self.fc = Linear(spec.blocks()[-1].out_ch, spec.classes, rng)

    def forward(self, x: np.ndarray, training: bool = True, update_stats: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        expect = (self.spec.in_channels, *self.spec.input_hw)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ValueError(f"batch shape {x.shape} does not match (N, {expect})")
        out = np.maximum(self.stem_bn.forward(self.stem.forward(x), training, update_stats), 0.0)
        self._stem_out = out
        for blk in self.blocks:
            out = blk.forward(out, training, update_stats)
        self._feat_shape = out.shape
        return self.fc.forward(out.mean(axis=(2, 3)))

    def backward(self, d_logits: np.ndarray) -> np.ndarray:
        d = self.fc.backward(d_logits)
        n, c, h, w = self._feat_shape
        d = np.broadcast_to(d[:, :, None, None] / (h * w), self._feat_shape).copy()
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        d = _relu_backward(d, self._stem_out)
        return self.stem.backward(self.stem_bn.backward(d))

    def relu_pattern(self) -> np.ndarray:
        """Sign pattern of every ReLU input from the last forward pass."""
        pats = [self._stem_out > 0]
        for b in self.blocks:
            pats += [a > 0 for a in b._acts]
            pats.append(b._out > 0)
            if b.attention is not None:
                pats.append(b.attention.block._cache["h_pre"] > 0)
        return np.concatenate([p.ravel() for p in pats])

    def modules(self) -> Iterator[tuple[str, object]]:
        yield "stem.conv", self.stem
        yield "stem.bn", self.stem_bn
        for i, blk in enumerate(self.blocks):
            for name, mod in blk.modules():
                yield f"block{i}.{name}", mod
        yield "fc", self.fc

    def named_params(self) -> list[tuple[str, Param]]:
        """Learnable parameters; attention kernels appear only while learnable."""
        return [(f"{m}.{p}", prm) for m, mod in self.modules() for p, prm in mod.params()]

    def state_params(self) -> list[tuple[str, Param]]:
        """Every parameter including frozen banks, in declaration order."""
        out = []
        for m, mod in self.modules():
            it = mod.all_params() if isinstance(mod, Attention) else mod.params()
            out.extend((f"{m}.{p}", prm) for p, prm in it)
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{m}.{b}", arr) for m, mod in self.modules() if isinstance(mod, BatchNorm2d)
                for b, arr in mod.buffers()]

    def attention_blocks(self) -> list[AttentionBlock]:
        return [b.attention.block for b in self.blocks if b.attention is not None]

    def set_filters_learnable(self, flag: bool) -> None:
        for blk in self.attention_blocks():
            blk.filters_learnable = flag


def build_block(spec: BlockSpec, rng_seed: int = 0, hw: tuple[int, int] = (8, 8),
                attention: AttentionConfig | None = None) -> Block:
    att = attention or AttentionConfig()
    return Block(spec, hw, att, derive_seed(rng_seed, STREAM_INIT), derive_seed(rng_seed, STREAM_BANKS))


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


def count_params(obj) -> int:
    """Learnable scalar count of a Network, Block, or NetworkSpec (built with seed 0)."""
    if isinstance(obj, NetworkSpec):
        obj = Network(obj, 0)
    if isinstance(obj, Network):
        return sum(p.value.size for _, p in obj.named_params())
    if isinstance(obj, Block):
        return sum(p.value.size for _, mod in obj.modules() for _, p in mod.params())
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def attention_param_count(c: int, reduction: int, dim: int = 0, learnable: bool = False) -> int:
    """Closed form: W1 and W2 each hold C * hidden scalars, plus C*dim filter entries if learnable."""
    return 2 * c * hidden_width(c, reduction) + (c * dim if learnable else 0)
