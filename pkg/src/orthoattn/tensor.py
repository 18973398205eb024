"""Numeric substrate: float64 numpy arrays plus a pinned, splittable RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Randomness
comes from numpy's PCG64 bit generator; child streams are derived from a
root seed with ``SeedSequence`` so that every subsystem (data, weights,
filter banks, shuffling, augmentation) has an independent, reproducible
stream controlled by one integer.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float64

# Stream ids used with derive_seed. Fixed forever; changing them changes every
# downstream artifact.
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_BANKS = 3
STREAM_SHUFFLE = 4
STREAM_AUGMENT = 5
STREAM_SPLIT = 6


class ShapeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded from a 64-bit unsigned integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a child 64-bit seed from ``seed`` and a path of integer keys.

    Uses ``SeedSequence(entropy=seed, spawn_key=keys)`` and takes the first
    64 bits of its generated state, so ``derive_seed(s, a, b)`` is stable
    across runs and platforms.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def randn(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """I.i.d. standard-normal entries; advances ``rng``.

    Draws are prefix-stable: the first k values of a draw of n >= k values
    equal a draw of k values from an identically seeded generator.
    """
    return rng.standard_normal(_check_shape(shape), dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def dot(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.dot(a, b))
