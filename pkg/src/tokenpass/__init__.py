"""Vision-transformer segmentation with confidence-based token halting."""

from .backbone import ModelSpec, TokenSequence, Weights
from .engine import EngineConfig, Model, SegReport, forward, forward_dense
from .flops import FlopsConvention, layer_flops, model_flops, reduction_ratio

__all__ = [
    "EngineConfig",
    "FlopsConvention",
    "Model",
    "ModelSpec",
    "SegReport",
    "TokenSequence",
    "Weights",
    "forward",
    "forward_dense",
    "layer_flops",
    "model_flops",
    "reduction_ratio",
]
__version__ = "0.1.0"
