"""Refined attention for small vision transformers.

A numpy package with hand-written backward passes for every operation a
refined-attention ViT needs: map expansion, head-wise convolution over
attention matrices, map reduction, plus training, analysis and evaluation
tooling around them.
"""

from .attention import (
    AttentionBundle,
    RefinerConfig,
    RefinerWeights,
    check_dla_1d_equivalence,
    check_expansion_equivalence,
    refiner_forward,
)
from .model import ModelConfig, count_flops, count_params, make_config, preset
from .tensor import GradTape, Tensor, set_debug_checks

__version__ = "0.1.0"

__all__ = [
    "AttentionBundle",
    "GradTape",
    "ModelConfig",
    "RefinerConfig",
    "RefinerWeights",
    "Tensor",
    "check_dla_1d_equivalence",
    "check_expansion_equivalence",
    "count_flops",
    "count_params",
    "make_config",
    "preset",
    "refiner_forward",
    "set_debug_checks",
    "__version__",
]
