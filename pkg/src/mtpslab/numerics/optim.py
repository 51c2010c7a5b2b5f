"""Adam with decoupled weight decay, plus global-norm gradient clipping."""

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import NumericError, ShapeError


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, lr=None):
    """One bias-corrected update of every parameter holding a gradient.

    ``params`` maps names to Tensors; ``lr`` overrides ``state.lr`` for this
    step (the training loop passes the scheduled rate). Parameters without a
    gradient are left alone but still advance the shared step counter.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"adam_step: non-finite gradient in parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        grad = np.ascontiguousarray(p.grad, dtype=p.data.dtype)
        kernels.adam_update(p.data, grad, state.m[name], state.v[name], lr, state.beta1,
                            state.beta2, state.eps, state.weight_decay, bc1, bc2)


def global_grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False).ravel()
            total += float(g @ g)
    return total ** 0.5


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


def zero_grad(params):
    for p in params.values():
        p.grad = None
