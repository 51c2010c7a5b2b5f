"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy (or a kernel from
:mod:`mtpslab.kernels`) and records a closure mapping the output gradient to
input gradients. Ops are deliberately coarse (a whole attention block is one
entry) to keep tape overhead small.
"""

import math

import numpy as np

from .. import kernels
from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, record

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` (or batched ``b``)."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype} for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb
    return record(out, (a, b), backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x):
    shape, n = x.shape, x.size
    return record(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(x, shape):
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(data, tuple(tensors), backward)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(x.data[index], (x,), backward)


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; gradient scatter-adds into the used rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id outside [0, {weight.shape[0]})")
    shape = weight.shape

    def backward(g):
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return record(weight.data[ids], (weight,), backward)


def rms_norm(x, gain, eps=RMS_EPS):
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    shape = x.shape
    x2 = x.data.reshape(-1, shape[-1])
    y, inv = kernels.rms_norm_fwd(x2, gain.data, eps)

    def backward(g):
        dx, dgain = kernels.rms_norm_bwd(g.reshape(-1, shape[-1]), x2, gain.data, inv)
        return dx.reshape(shape), dgain

    return record(y.reshape(shape), (x, gain), backward)


def swiglu(x):
    """``silu(a) * b`` where ``a, b`` are the two halves of the last axis."""
    shape = x.shape
    x2 = x.data.reshape(-1, shape[-1])
    y = kernels.swiglu_fwd(x2)
    out_shape = shape[:-1] + (shape[-1] // 2,)

    def backward(g):
        return (kernels.swiglu_bwd(g.reshape(-1, out_shape[-1]), x2).reshape(shape),)

    return record(y.reshape(out_shape), (x,), backward)


def masked_softmax(logits, mask):
    """Softmax over the last axis where ``mask`` is true; exact zeros elsewhere."""
    shape = logits.shape
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    p = kernels.masked_softmax(logits.data.reshape(-1, shape[-1]), mask.reshape(-1, shape[-1]))

    def backward(g):
        return (kernels.softmax_backward(p, g.reshape(-1, shape[-1])).reshape(shape),)

    return record(p.reshape(shape), (logits,), backward)


def cross_entropy(logits, targets, ignore_index=-100):
    """Mean cross-entropy of ``logits[..., V]`` against integer ``targets[...]``.

    Positions whose target equals ``ignore_index`` are excluded; if every
    position is excluded the loss is 0 with a zero gradient.
    """
    vocab = logits.shape[-1]
    targets = np.asarray(targets).reshape(-1)
    loss, _, dlogits = kernels.cross_entropy(logits.data.reshape(-1, vocab), targets, ignore_index)
    shape = logits.shape

    def backward(g):
        return (dlogits.reshape(shape) * g,)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- rotary position encoding ------------------------------------------------

def rope_tables(positions, head_dim, dtype, base=ROPE_BASE):
    """cos/sin tables of shape ``positions.shape + (head_dim // 2,)``."""
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x, cos, sin, inverse=False):
    """Rotate adjacent pairs ``(x[2i], x[2i+1])`` of the last axis."""
    if inverse:
        sin = -sin
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def rotary_apply(x, positions, base=ROPE_BASE):
    """Rotary encoding of ``x[..., L, H, d_head]`` at integer ``positions[..., L]``."""
    cos, sin = rope_tables(positions, x.shape[-1], x.dtype, base)
    cos, sin = cos[..., None, :], sin[..., None, :]
    return record(rope_rotate(x.data, cos, sin), (x,),
                  lambda g: (rope_rotate(g, cos, sin, inverse=True),))


def sinusoidal_table(positions, dim, dtype):
    """Absolute sin/cos position features (used only in the ablation config)."""
    half = dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


# -- attention -----------------------------------------------------------------

def attention_probs(q, k, mask):
    """Masked attention weights for ``q[B,H,Lq,dh]``, ``k[B,H,Lk,dh]``, ``mask[B,Lq,Lk]``."""
    b, h, lq, dh = q.shape
    lk = k.shape[2]
    scores = (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(1.0 / math.sqrt(dh))
    m = np.broadcast_to(mask[:, None, :, :], (b, h, lq, lk))
    p = kernels.masked_softmax(scores.reshape(-1, lk), m.reshape(-1, lk))
    return p.reshape(b, h, lq, lk)


def split_heads(qkv, n_heads):
    """``qkv[B, L, 3d]`` -> three arrays ``[B, L, H, dh]``."""
    b, l, three_d = qkv.shape
    d = three_d // 3
    x = qkv.reshape(b, l, 3, n_heads, d // n_heads)
    return x[:, :, 0], x[:, :, 1], x[:, :, 2]


def attention(qkv, mask, positions, n_heads, use_rope=True):
    """Multi-head self-attention from a fused projection ``qkv[B, L, 3d]``.

    ``mask[B, L, L]`` is the boolean visibility matrix (row attends to
    column); ``positions[B, L]`` feed the rotary encoding. Returns ``[B, L, d]``.
    """
    b, l, three_d = qkv.shape
    d = three_d // 3
    dh = d // n_heads
    q, k, v = split_heads(qkv.data, n_heads)
    if use_rope:
        cos, sin = rope_tables(positions, dh, qkv.dtype)
        cos, sin = cos[:, :, None, :], sin[:, :, None, :]
        q = rope_rotate(q, cos, sin)
        k = rope_rotate(k, cos, sin)
    qh = np.ascontiguousarray(q.transpose(0, 2, 1, 3))
    kh = np.ascontiguousarray(k.transpose(0, 2, 1, 3))
    vh = np.ascontiguousarray(v.transpose(0, 2, 1, 3))
    p = attention_probs(qh, kh, mask)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(b, l, d)
    scale = qkv.dtype.type(1.0 / math.sqrt(dh))

    def backward(g):
        go = g.reshape(b, l, n_heads, dh).transpose(0, 2, 1, 3)
        dv = np.swapaxes(p, -1, -2) @ go
        dp = go @ np.swapaxes(vh, -1, -2)
        ds = kernels.softmax_backward(p.reshape(-1, l), dp.reshape(-1, l)).reshape(p.shape) * scale
        dq = ds @ kh
        dk = np.swapaxes(ds, -1, -2) @ qh
        dq = dq.transpose(0, 2, 1, 3)
        dk = dk.transpose(0, 2, 1, 3)
        if use_rope:
            dq = rope_rotate(dq, cos, sin, inverse=True)
            dk = rope_rotate(dk, cos, sin, inverse=True)
        dqkv = np.empty((b, l, 3, n_heads, dh), dtype=g.dtype)
        dqkv[:, :, 0] = dq
        dqkv[:, :, 1] = dk
        dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
        return (dqkv.reshape(b, l, three_d),)

    return record(out, (qkv,), backward)
