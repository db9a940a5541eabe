"""Activation compression for memory-lean fine-tuning of conv nets.

Submodules: ``tensor`` (unfold, mode products, orthogonalization, SVD),
``decomposition`` (HOSVD and warm-started subspace iteration),
``layers`` (conv/fc forward and backward, low-rank weight gradients, SGD),
``selection`` (perplexity calibration and budgeted rank selection),
``cost`` (closed-form FLOP and memory accounting), ``training`` and ``cli``.
"""
from .decomposition import (
    RankVector,
    TuckerFactors,
    WarmStartCache,
    asi_compress,
    hosvd_fixed,
    hosvd_variance,
    reconstruct,
    stored_elements,
)
from .kernels import BACKEND
from .tensor import Shape4, fold, mode_product, orthogonalize, rank_for_variance, truncated_svd, unfold

__version__ = "0.1.0"
