"""Minimal reverse-mode autodiff engine backed by numpy."""

from .checkpoint import load_weights, save_weights
from .losses import bce, kl_channelwise, smooth_l1
from .ops import (
    add,
    concat,
    conv1d_temporal,
    conv2d,
    div,
    exp,
    gather_cells,
    log,
    log_softmax,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    upsample_nearest,
)
from .ops import sum as tsum
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, current_tape, fresh_tape, no_grad

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "add", "backward", "bce", "concat",
    "conv1d_temporal", "conv2d", "current_tape", "div", "exp", "fresh_tape", "gather_cells",
    "kl_channelwise", "load_weights", "log", "log_softmax", "mean", "mul", "no_grad", "relu",
    "reshape", "save_weights", "sigmoid", "smooth_l1", "softmax", "stack", "sub", "tsum",
    "upsample_nearest",
]
