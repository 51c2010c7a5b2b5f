"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the numpy
fallback. Setting ``MTPSLAB_PURE_PYTHON=1`` forces the fallback. Callers go
through the module-level functions below so :func:`use_backend` can switch
implementations at runtime (tests and the kernel benchmark do this).
"""

import contextlib
import os

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"python": _fallback}
if _core is not None:
    _BACKENDS["compiled"] = _core

_impl = _fallback
BACKEND = "python"


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    _impl = _BACKENDS[name]
    BACKEND = name


@contextlib.contextmanager
def use_backend(name):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


if _core is not None and os.environ.get("MTPSLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    set_backend("compiled")


def _c(a):
    return np.ascontiguousarray(a)


def masked_softmax(scores, mask):
    return _impl.masked_softmax(_c(scores), _c(mask))


def softmax_backward(p, dp):
    return _impl.softmax_backward(_c(p), _c(dp))


def rms_norm_fwd(x, gain, eps):
    return _impl.rms_norm_fwd(_c(x), _c(gain), eps)


def rms_norm_bwd(dy, x, gain, inv):
    return _impl.rms_norm_bwd(_c(dy), _c(x), _c(gain), _c(inv))


def swiglu_fwd(x):
    return _impl.swiglu_fwd(_c(x))


def swiglu_bwd(dy, x):
    return _impl.swiglu_bwd(_c(dy), _c(x))


def cross_entropy(logits, targets, ignore_index):
    return _impl.cross_entropy(_c(logits), np.ascontiguousarray(targets, dtype=np.int64), int(ignore_index))


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place; every array must be contiguous and of the parameter's dtype."""
    _impl.adam_update(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                      lr, beta1, beta2, eps, weight_decay, bc1, bc2)


def levenshtein(a, b):
    return _impl.levenshtein(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
