"""Minimal tensor arithmetic, reverse-mode gradients and Adam."""

from . import functional
from .functional import (
    attention,
    concat,
    cross_entropy,
    embedding,
    masked_softmax,
    matmul,
    mean,
    reshape,
    rms_norm,
    rotary_apply,
    swiglu,
)
from .optim import AdamState, adam_step, clip_grad_norm, zero_grad
from .tensor import DTYPES, Tape, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "AdamState",
    "DTYPES",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "attention",
    "backward",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "embedding",
    "functional",
    "grad_enabled",
    "masked_softmax",
    "matmul",
    "mean",
    "no_grad",
    "reshape",
    "rms_norm",
    "rotary_apply",
    "swiglu",
    "zero_grad",
]
