"""Decoder layer and output head, in two forms.

The taped form works on :class:`Tensor` batches ``[B, L, d]`` and is used for
training. The numpy form works on one sequence ``[n, d]`` of *new* positions
against an optional key/value cache and is used for generation. Both call the
same kernels, so they agree to rounding.
"""

import numpy as np

from .. import kernels
from ..numerics import functional as F
from ..numerics.functional import RMS_EPS, attention_probs, rope_rotate, rope_tables

LAYER_PARAMS = ("attn_norm", "qkv", "wo", "ffn_norm", "w_in", "w_out")


def layer_shapes(d_model, d_ff):
    return {
        "attn_norm": (d_model,),
        "qkv": (d_model, 3 * d_model),
        "wo": (d_model, d_model),
        "ffn_norm": (d_model,),
        "w_in": (d_model, 2 * d_ff),
        "w_out": (d_ff, d_model),
    }


def head_shapes(d_model, n_out):
    return {"norm": (d_model,), "weight": (d_model, n_out), "bias": (n_out,)}


# -- taped ---------------------------------------------------------------------

def decoder_layer(P, prefix, x, mask, positions, n_heads, use_rope=True):
    """Pre-norm attention + SwiGLU feed-forward, residual around each."""
    h = F.rms_norm(x, P[prefix + "attn_norm"])
    a = F.attention(F.matmul(h, P[prefix + "qkv"]), mask, positions, n_heads, use_rope)
    x = x + F.matmul(a, P[prefix + "wo"])
    h = F.rms_norm(x, P[prefix + "ffn_norm"])
    return x + F.matmul(F.swiglu(F.matmul(h, P[prefix + "w_in"])), P[prefix + "w_out"])


def output_head(P, prefix, h):
    """``Linear(RMSNorm(h))`` producing vocabulary logits."""
    return F.matmul(F.rms_norm(h, P[prefix + "norm"]), P[prefix + "weight"]) + P[prefix + "bias"]


# -- numpy / cached ------------------------------------------------------------

class LayerCache:
    """Rotated keys and values per absolute position slot, ``[H, capacity, dh]``."""

    __slots__ = ("k", "v")

    def __init__(self, n_heads, capacity, head_dim, dtype):
        self.k = np.zeros((n_heads, capacity, head_dim), dtype=dtype)
        self.v = np.zeros((n_heads, capacity, head_dim), dtype=dtype)

    def grow(self, capacity):
        h, cap, dh = self.k.shape
        if capacity <= cap:
            return
        for name in ("k", "v"):
            old = getattr(self, name)
            new = np.zeros((h, capacity, dh), dtype=old.dtype)
            new[:, :cap] = old
            setattr(self, name, new)


def rms_norm_np(x, gain):
    return kernels.rms_norm_fwd(x, gain, RMS_EPS)[0]


def decoder_layer_np(W, prefix, x, positions, mask_rows, n_heads, cache=None, use_rope=True, rope=None):
    """Forward ``x[n, d]`` (positions ``positions[n]``) through one layer.

    With a cache, keys/values of the new positions are written into their
    slots and attention runs over slots ``0 .. mask_rows.shape[1] - 1``;
    without one, ``x`` is the whole sequence and ``mask_rows`` is ``[n, n]``.
    ``rope`` optionally supplies precomputed ``(cos, sin)`` rows for ``positions``.
    """
    n, d = x.shape
    dh = d // n_heads
    h = rms_norm_np(x, W[prefix + "attn_norm"])
    qkv = (h @ W[prefix + "qkv"]).reshape(n, 3, n_heads, dh)
    q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
    if use_rope:
        cos, sin = rope if rope is not None else rope_tables(positions, dh, x.dtype)
        cos, sin = cos[:, None, :], sin[:, None, :]
        q = rope_rotate(q, cos, sin)
        k = rope_rotate(k, cos, sin)
    q = q.transpose(1, 0, 2)
    if cache is None:
        keys = np.ascontiguousarray(k.transpose(1, 0, 2))
        vals = np.ascontiguousarray(v.transpose(1, 0, 2))
    else:
        cache.k[:, positions] = k.transpose(1, 0, 2)
        cache.v[:, positions] = v.transpose(1, 0, 2)
        end = mask_rows.shape[1]
        keys, vals = cache.k[:, :end], cache.v[:, :end]
    p = attention_probs(q[None], keys[None], mask_rows[None])[0]
    a = (p @ vals).transpose(1, 0, 2).reshape(n, d)
    x = x + a @ W[prefix + "wo"]
    h = rms_norm_np(x, W[prefix + "ffn_norm"])
    return x + kernels.swiglu_fwd(h @ W[prefix + "w_in"]) @ W[prefix + "w_out"]


def output_head_np(W, prefix, h):
    return rms_norm_np(h, W[prefix + "norm"]) @ W[prefix + "weight"] + W[prefix + "bias"]


def init_matrix(rng, shape, dtype, std=0.02):
    return (rng.standard_normal(shape) * std).astype(dtype)

