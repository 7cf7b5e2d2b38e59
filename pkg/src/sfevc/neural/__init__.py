"""Minimal differentiable-computation substrate on numpy."""

from .autograd import (
    Tensor,
    as_tensor,
    concat,
    gather_time,
    lerp_time,
    relu,
    sigmoid,
    square,
    stack,
    tabs,
    tanh,
)
from .layers import apply_mask, blstm, conv1d, group_norm, length_mask, linear, reverse_index
from .params import Adam, ModelParams, adam_step, load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "ModelParams",
    "Tensor",
    "adam_step",
    "apply_mask",
    "as_tensor",
    "blstm",
    "concat",
    "conv1d",
    "gather_time",
    "group_norm",
    "length_mask",
    "lerp_time",
    "linear",
    "load_checkpoint",
    "relu",
    "reverse_index",
    "save_checkpoint",
    "sigmoid",
    "square",
    "stack",
    "tabs",
    "tanh",
]
