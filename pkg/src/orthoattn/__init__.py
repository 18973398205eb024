"""Orthogonal channel attention in numpy.

Squeeze filter banks (orthonormal random, GAP, DCT, raw random), the
excitation MLP with exact gradients, desk-scale residual backbones, and a
reproducible trainer.
"""

__version__ = "0.1.0"

from .attention import AttentionBlock, GradBundle, squeeze, squeeze_grouped
from .backbone import AttentionConfig, BlockSpec, Network, NetworkSpec, build_block, count_params, preset
from .filterbank import (FilterBank, build_dct, build_gap, build_ortho, build_random, check_orthonormality,
                         dct_basis, gram_schmidt, load_bank, save_bank)
from .train import TrainConfig, Trainer, lr_at, train

__all__ = [
    "AttentionBlock", "GradBundle", "squeeze", "squeeze_grouped",
    "AttentionConfig", "BlockSpec", "Network", "NetworkSpec", "build_block", "count_params", "preset",
    "FilterBank", "build_dct", "build_gap", "build_ortho", "build_random", "check_orthonormality",
    "dct_basis", "gram_schmidt", "load_bank", "save_bank",
    "TrainConfig", "Trainer", "lr_at", "train",
]
