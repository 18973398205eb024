"""Training: SGD with momentum, warm-restart cosine schedule, label smoothing,
filter fine-tuning windows, OCK1 checkpoints, and the squeeze-kind comparison.

Batch order and augmentation for epoch e are drawn from generators seeded
with ``derive_seed(cfg.seed, stream, e)``, so a run resumed from a checkpoint
at epoch e sees exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import Network, NetworkSpec
from .data import Dataset, augment_batch
from .errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, VersionError
from .filterbank import gram_schmidt, ortho_blocks
from .tensor import STREAM_AUGMENT, STREAM_SHUFFLE, derive_seed, make_rng

log = logging.getLogger(__name__)

SCHEDULES = ("cosine_warm_restarts", "constant")
FILTER_MODES = ("frozen", "finetuned_last", "finetuned_mod5_plus_last", "finetuned_first")
# shorthand names for the three fine-tuning recipes
FILTER_ALIASES = {
    "finetuned20": ("finetuned_last", 20),
    "finetuned40": ("finetuned_mod5_plus_last", 20),
    "finetuned30": ("finetuned_first", 30),
}


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    label_smoothing: float = 0.1
    schedule: str = "cosine_warm_restarts"
    restart_period: int = 10
    restart_decay: float = 0.1  # 0.9 for the "reduce by 10%" reading
    filter_learning: str = "frozen"
    filter_epochs: int = 20
    filter_lr_mult: float = 1.0
    reorthonormalize: bool = False
    augment: bool = True
    eval_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.filter_learning in FILTER_ALIASES:
            self.filter_learning, self.filter_epochs = FILTER_ALIASES[self.filter_learning]
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.restart_period < 1:
            raise ValueError("epochs, batch_size and restart_period must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.filter_learning not in FILTER_MODES:
            raise ValueError(f"unknown filter_learning mode {self.filter_learning!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float | Sequence[float] = 0.0) -> None:
    """In place: v <- m*v + g + wd*p ; p <- p - lr*v."""
    if not len(params) == len(grads) == len(velocities):
        raise ValueError("params, grads and velocities differ in length")
    wds = [weight_decay] * len(params) if np.isscalar(weight_decay) else list(weight_decay)
    for p, g, v, wd in zip(params, grads, velocities, wds):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * v


def lr_at(cfg: TrainConfig, epoch: int, step: int = 0, steps_per_epoch: int = 1) -> float:
    """Cosine annealing inside restart_period-epoch cycles; each cycle's base
    rate is restart_decay times the previous one's."""
    if cfg.schedule == "constant":
        return cfg.lr
    cycle, pos = divmod(epoch, cfg.restart_period)
    base = cfg.lr * cfg.restart_decay ** cycle
    t = pos * steps_per_epoch + step
    total = cfg.restart_period * steps_per_epoch
    return base * (1.0 + math.cos(math.pi * t / total)) / 2.0


def ce_label_smoothing(logits: np.ndarray, target: np.ndarray, eps: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against (1-eps)*onehot + eps/K, and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    n, k = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    q = np.full((n, k), eps / k)
    q[np.arange(n), target] += 1.0 - eps
    loss = float(-(q * logp).sum() / n)
    return loss, (np.exp(logp) - q) / n


def filter_learning_active(cfg: TrainConfig, epoch: int) -> bool:
    """Whether squeeze filters are updated in (0-indexed) ``epoch``.

    finetuned_last(k)            the last k epochs
    finetuned_mod5_plus_last(k)  epochs divisible by five, plus the last k
    finetuned_first(k)           the first k epochs
    """
    mode, k, total = cfg.filter_learning, cfg.filter_epochs, cfg.epochs
    if mode == "frozen":
        return False
    if mode == "finetuned_last":
        return epoch >= total - k
    if mode == "finetuned_mod5_plus_last":
        return epoch % 5 == 0 or epoch >= total - k
    if mode == "finetuned_first":
        return epoch < k
    raise ValueError(f"unknown filter_learning mode {mode!r}")


# ---------------------------------------------------------------- metrics

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_top1: float
    val_top5: float
    lr: float
    lr_trace: list[float] = field(default_factory=list, repr=False)
    wall_time: float = 0.0


@dataclass
class Metrics:
    epochs: list[EpochMetrics] = field(default_factory=list)

    def to_csv(self) -> str:
        """Rows epoch,split,metric,value; values use repr so they round-trip exactly."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for m in self.epochs:
            w.writerow([m.epoch, "train", "loss", repr(m.train_loss)])
            w.writerow([m.epoch, "train", "acc", repr(m.train_acc)])
            w.writerow([m.epoch, "train", "lr", repr(m.lr)])
            w.writerow([m.epoch, "val", "top1", repr(m.val_top1)])
            w.writerow([m.epoch, "val", "top5", repr(m.val_top5)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'epoch':>5} {'loss':>8} {'acc':>6} {'top1':>6} {'top5':>6} {'lr':>9} {'sec':>6}"]
        for m in self.epochs:
            lines.append(f"{m.epoch:>5} {m.train_loss:>8.4f} {m.train_acc:>6.3f} {m.val_top1:>6.3f} "
                         f"{m.val_top5:>6.3f} {m.lr:>9.2e} {m.wall_time:>6.1f}")
        return "\n".join(lines)

    def to_state(self) -> list[dict]:
        return [{k: v for k, v in asdict(m).items() if k != "wall_time"} for m in self.epochs]

    @classmethod
    def from_state(cls, rows: list[dict]) -> "Metrics":
        return cls([EpochMetrics(**r) for r in rows])


def evaluate(net: Network, ds: Dataset, batch_size: int = 256) -> tuple[float, float, float]:
    """(top-1, top-5, mean plain cross-entropy) in inference mode."""
    if len(ds) == 0:
        return float("nan"), float("nan"), float("nan")
    k = min(5, ds.class_count)
    top1 = top5 = 0
    loss = 0.0
    for s in range(0, len(ds), batch_size):
        x, y = ds.images[s:s + batch_size], ds.labels[s:s + batch_size]
        logits = net.forward(x, training=False)
        loss += ce_label_smoothing(logits, y, 0.0)[0] * len(y)
        order = np.argsort(-logits, axis=1, kind="stable")
        top1 += int(np.sum(order[:, 0] == y))
        top5 += int(np.sum(np.any(order[:, :k] == y[:, None], axis=1)))
    return top1 / len(ds), top5 / len(ds), loss / len(ds)


# ---------------------------------------------------------------- trainer

def _reorthonormalize(net: Network) -> None:
    for blk in net.attention_blocks():
        if blk.init_bank.kind != "ortho":
            continue
        for s, e in ortho_blocks(blk.c, blk.init_bank.dim):
            blk.kernel[s:e] = gram_schmidt(blk.kernel[s:e])


class Trainer:
    """Owns a network, its optimizer state, and the metrics stream."""

    def __init__(self, net: Network, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.value) for name, p in net.state_params()}
        self.metrics = Metrics()
        self.next_epoch = 0

    def _batches(self, n: int, epoch: int) -> list[np.ndarray]:
        perm = make_rng(derive_seed(self.cfg.seed, STREAM_SHUFFLE, epoch)).permutation(n)
        bs = self.cfg.batch_size
        out = [perm[s:s + bs] for s in range(0, n, bs)]
        # batch-norm needs at least two samples
        if len(out) > 1 and len(out[-1]) < 2:
            out.pop()
        return out

    def run_epoch(self, train: Dataset, val: Dataset | None = None) -> EpochMetrics:
        cfg, net, epoch = self.cfg, self.net, self.next_epoch
        t0 = time.perf_counter()
        learn_filters = filter_learning_active(cfg, epoch)
        net.set_filters_learnable(learn_filters)
        aug_rng = make_rng(derive_seed(cfg.seed, STREAM_AUGMENT, epoch))
        batches = self._batches(len(train), epoch)
        total_loss, correct, seen, trace = 0.0, 0, 0, []
        for step, idx in enumerate(batches):
            x = train.images[idx]
            if cfg.augment:
                x = augment_batch(aug_rng, x)
            y = train.labels[idx]
            logits = net.forward(x, training=True)
            loss, d = ce_label_smoothing(logits, y, cfg.label_smoothing)
            net.backward(d)
            lr = lr_at(cfg, epoch, step, len(batches))
            trace.append(lr)
            self._apply(lr)
            if learn_filters and cfg.reorthonormalize:
                _reorthonormalize(net)
            total_loss += loss * len(y)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            seen += len(y)
        top1, top5 = (float("nan"), float("nan"))
        if val is not None and len(val):
            top1, top5, _ = evaluate(net, val, cfg.eval_batch_size)
        m = EpochMetrics(epoch, total_loss / seen, correct / seen, top1, top5, trace[0], trace,
                         time.perf_counter() - t0)
        self.metrics.epochs.append(m)
        self.next_epoch += 1
        return m

    def _apply(self, lr: float) -> None:
        cfg = self.cfg
        for name, p in self.net.named_params():
            wd = 0.0 if p.group == "norm" else cfg.weight_decay
            step_lr = lr * cfg.filter_lr_mult if p.group == "bank" else lr
            sgd_step([p.value], [p.grad], [self.velocity[name]], step_lr, cfg.momentum, wd)

    def fit(self, train: Dataset, val: Dataset | None = None, until: int | None = None) -> Metrics:
        stop = self.cfg.epochs if until is None else min(until, self.cfg.epochs)
        while self.next_epoch < stop:
            m = self.run_epoch(train, val)
            log.info("epoch %d loss %.4f acc %.3f val %.3f", m.epoch, m.train_loss, m.train_acc, m.val_top1)
        return self.metrics


def train(net: Network, dataset: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          checkpoint: str | Path | None = None) -> tuple[Metrics, Trainer]:
    trainer = Trainer(net, cfg)
    metrics = trainer.fit(dataset, val)
    if checkpoint is not None:
        save_checkpoint(trainer, checkpoint)
    return metrics, trainer


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"OCK1"
CKPT_VERSION = 1


def _checkpoint_arrays(trainer: Trainer) -> list[tuple[str, np.ndarray]]:
    net = trainer.net
    arrays = [(f"param:{n}", p.value) for n, p in net.state_params()]
    arrays += [(f"buffer:{n}", b) for n, b in net.buffers()]
    arrays += [(f"bank_init:{i}", blk.init_bank.kernel) for i, blk in enumerate(net.attention_blocks())]
    arrays += [(f"velocity:{n}", trainer.velocity[n]) for n, _ in net.state_params()]
    return arrays


def checkpoint_bytes(trainer: Trainer, extra: dict | None = None) -> bytes:
    arrays = _checkpoint_arrays(trainer)
    header = {
        "spec": trainer.net.spec.to_dict(),
        "net_seed": trainer.net.seed,
        "cfg": asdict(trainer.cfg),
        "next_epoch": trainer.next_epoch,
        "rng": {"scheme": "derive_seed(seed, stream, epoch)", "seed": trainer.cfg.seed,
                "streams": {"shuffle": STREAM_SHUFFLE, "augment": STREAM_AUGMENT}},
        "metrics": trainer.metrics.to_state(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "extra": extra or {},
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hjson)) + hjson + payload
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(trainer: Trainer, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(trainer, extra))


def read_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 4:
        raise TruncatedFileError("truncated checkpoint")
    if blob[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(blob) < 16:
        raise TruncatedFileError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    if len(blob) < 12 + hlen + 4:
        raise TruncatedFileError("truncated checkpoint header")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    header = json.loads(blob[12:12 + hlen])
    off = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        if off + 8 * count > len(blob) - 4:
            raise TruncatedFileError(f"truncated payload at {name}")
        arrays[name] = np.frombuffer(blob, "<f8", count, off).astype(np.float64).reshape(shape)
        off += 8 * count
    if off != len(blob) - 4:
        raise FormatError("checkpoint payload length mismatch")
    return header, arrays


def load_checkpoint(path: str | Path) -> Trainer:
    """Rebuild network, optimizer state and metrics from an OCK1 file."""
    header, arrays = read_checkpoint(Path(path).read_bytes())
    spec = NetworkSpec.from_dict(header["spec"])
    net = Network(spec, header["net_seed"])
    trainer = Trainer(net, TrainConfig(**header["cfg"]))
    for name, p in net.state_params():
        p.value[...] = arrays[f"param:{name}"]
        trainer.velocity[name][...] = arrays[f"velocity:{name}"]
    for name, b in net.buffers():
        b[...] = arrays[f"buffer:{name}"]
    for i, blk in enumerate(net.attention_blocks()):
        blk.init_bank = blk.init_bank.with_kernel(arrays[f"bank_init:{i}"])
    trainer.next_epoch = header["next_epoch"]
    trainer.metrics = Metrics.from_state(header["metrics"])
    trainer.extra = header.get("extra", {})
    return trainer


# ---------------------------------------------------------------- baselines

def linear_baseline(train: Dataset, val: Dataset | None = None, epochs: int = 50, lr: float = 0.1,
                    batch_size: int = 32, seed: int = 0) -> tuple[float, float]:
    """Softmax regression on raw pixels; returns (train acc, val acc)."""
    x = train.images.reshape(len(train), -1)
    k = train.class_count
    w = np.zeros((k, x.shape[1]))
    b = np.zeros(k)
    for epoch in range(epochs):
        perm = make_rng(derive_seed(seed, STREAM_SHUFFLE, epoch)).permutation(len(x))
        for s in range(0, len(x), batch_size):
            idx = perm[s:s + batch_size]
            _, d = ce_label_smoothing(x[idx] @ w.T + b, train.labels[idx])
            w -= lr * d.T @ x[idx]
            b -= lr * d.sum(axis=0)

    def acc(ds: Dataset) -> float:
        return float(np.mean(np.argmax(ds.images.reshape(len(ds), -1) @ w.T + b, axis=1) == ds.labels))

    return acc(train), (acc(val) if val is not None and len(val) else float("nan"))


def compare_squeeze(train_ds: Dataset, val_ds: Dataset, base_spec: NetworkSpec, kinds: Sequence[str],
                    seeds: Sequence[int], cfg: TrainConfig) -> list[dict]:
    """Final val top-1 per squeeze kind, mean and sample sd over seeds.

    For a given seed every kind sees the same batch order and augmentation,
    and the same conv/classifier initialization.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for kind in kinds:
        spec = replace(base_spec, attention=replace(base_spec.attention, kind=kind))
        finals = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            metrics, _ = train(Network(spec, seed), train_ds, run_cfg, val_ds)
            finals.append(metrics.epochs[-1].val_top1)
        sd = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
        rows.append({"kind": kind, "n_seeds": len(seeds), "mean_t1": float(np.mean(finals)),
                     "sd_t1": sd, "runs": finals})
    return rows


def format_comparison(rows: list[dict]) -> str:
    lines = ["kind,n_seeds,mean_t1,sd_t1"]
    lines += [f"{r['kind']},{r['n_seeds']},{r['mean_t1']!r},{r['sd_t1']!r}" for r in rows]
    lines.append("")
    lines.append(f"{'kind':<8} {'seeds':>5}  top-1 (mean ± sd)")
    lines += [f"{r['kind']:<8} {r['n_seeds']:>5}  {r['mean_t1']:.4f} ± {r['sd_t1']:.4f}" for r in rows]
    return "\n".join(lines)
