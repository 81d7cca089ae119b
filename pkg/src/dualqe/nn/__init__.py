"""Minimal reverse-mode tensor engine and the layers the models share."""

from .layers import (
    AttentionWeights,
    BiGRU,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    gru_bidirectional,
    multi_head_attention,
    sinusoidal_positions,
)
from .optim import Adam, adam_step, grad_check
from .tensor import Tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AttentionWeights",
    "BiGRU",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "grad_check",
    "gru_bidirectional",
    "is_grad_enabled",
    "multi_head_attention",
    "no_grad",
    "sinusoidal_positions",
]
