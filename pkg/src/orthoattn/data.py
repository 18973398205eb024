"""Datasets: IDX ingestion, a synthetic bar-pattern task, and augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimMismatchError, TruncatedFileError
from .tensor import DTYPE, STREAM_SPLIT, derive_seed, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DimMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def split(self, val_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic shuffled train/val split."""
        n_val = int(round(len(self) * val_fraction))
        perm = make_rng(derive_seed(seed, STREAM_SPLIT)).permutation(len(self))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    def equals(self, other: "Dataset") -> bool:
        return (self.class_count == other.class_count
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(blob) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    payload = blob[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return dims, payload[:need]


def load_idx(images_path: str | Path, labels_path: str | Path, class_count: int | None = None) -> Dataset:
    """Big-endian IDX u8 images (N,H,W) and labels (N,), pixels scaled by 1/255."""
    (n, h, w), pix = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    (m,), lab = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if n != m:
        raise DimMismatchError(f"dim mismatch: {n} images vs {m} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, h, w).astype(DTYPE) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels, class_count)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def save_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    if ds.images.shape[1] != 1:
        raise ValueError("IDX stores single-channel images only")
    if ds.class_count > 256:
        raise ValueError("IDX u8 labels hold at most 256 classes")
    n, _, h, w = ds.images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + quantize(ds.images).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def bar_pattern(h: int, w: int, angle: float, cy: float, cx: float, half_length: float,
                width: float = 1.0) -> np.ndarray:
    """Soft segment centred at (cy, cx) at ``angle`` radians, Gaussian profile across it."""
    yy, xx = np.mgrid[0:h, 0:w].astype(DTYPE)
    dist = np.abs(-(yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle))
    along = np.abs((yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle))
    return np.exp(-0.5 * (dist / width) ** 2) * (along <= half_length)


def make_synthetic(seed: int, classes: int, n_per_class: int, h: int = 32, w: int = 32,
                   noise: float = 0.1) -> Dataset:
    """Class k shows a pair of bars at +-theta_k, theta_k = (pi/2) k / (classes-1).

    The pair is symmetric under horizontal flips, so flip augmentation keeps
    labels valid. Bars have half-length 0.2*min(H, W), centres jitter
    uniformly by up to H/4 and W/4, intensity noise is N(0, noise^2), pixels
    are clipped to [0, 1]. Examples are shuffled.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = make_rng(seed)
    jy, jx = h / 4, w / 4
    half = 0.2 * min(h, w)
    images = np.empty((classes * n_per_class, 1, h, w), dtype=DTYPE)
    labels = np.repeat(np.arange(classes), n_per_class)
    for idx, k in enumerate(labels):
        theta = 0.5 * np.pi * k / (classes - 1)
        cy = (h - 1) / 2 + rng.uniform(-jy, jy)
        cx = (w - 1) / 2 + rng.uniform(-jx, jx)
        img = np.maximum(bar_pattern(h, w, theta, cy, cx, half), bar_pattern(h, w, -theta, cy, cx, half))
        img = img + noise * rng.standard_normal((h, w))
        images[idx, 0] = np.clip(img, 0.0, 1.0)
    perm = rng.permutation(len(labels))
    return Dataset(images[perm], labels[perm], classes)


def crop_pad(h: int) -> int:
    """One pixel of padding per eight of image size."""
    return max(1, h // 8)


def augment(rng: np.random.Generator, image: np.ndarray, flip: bool | None = None,
            offset: tuple[int, int] | None = None) -> np.ndarray:
    """Random horizontal flip (p=0.5) then random crop from a zero-padded image.

    ``flip`` and ``offset`` override the random draws; offset (p, p) with
    p = crop_pad(H) is the centred, identity crop.
    """
    c, h, w = image.shape
    ph, pw = crop_pad(h), crop_pad(w)
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    if offset is None:
        oy, ox = int(rng.integers(0, 2 * ph + 1)), int(rng.integers(0, 2 * pw + 1))
    else:
        oy, ox = offset
    out = image[:, :, ::-1] if do_flip else image
    padded = np.pad(out, ((0, 0), (ph, ph), (pw, pw)))
    return np.ascontiguousarray(padded[:, oy:oy + h, ox:ox + w])


def augment_batch(rng: np.random.Generator, images: np.ndarray) -> np.ndarray:
    return np.stack([augment(rng, img) for img in images])
