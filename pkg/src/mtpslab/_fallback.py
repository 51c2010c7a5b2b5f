"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_core`` extension. Arrays passed in are C-contiguous; outputs are freshly
allocated unless the name says otherwise.
"""

import numpy as np

from .errors import InvalidMaskError


def masked_softmax(scores, mask):
    """Row softmax over the last axis of a 2-D array, restricted to ``mask``.

    ``mask`` is a boolean array of the same shape. Masked entries come out as
    exactly 0.0.
    """
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("masked_softmax: a row has no visible entries")
    neg = np.where(mask, scores, -np.inf)
    neg -= neg.max(axis=-1, keepdims=True)
    np.exp(neg, out=neg)
    neg /= neg.sum(axis=-1, keepdims=True)
    return neg


def softmax_backward(p, dp):
    """Gradient of a row softmax: p * (dp - sum(p * dp))."""
    dot = np.einsum("ij,ij->i", p, dp)[:, None]
    return p * (dp - dot)


def rms_norm_fwd(x, gain, eps):
    """RMS normalisation of the rows of a 2-D array. Returns (y, inv_rms)."""
    ms = np.einsum("ij,ij->i", x, x) / x.shape[1]
    inv = 1.0 / np.sqrt(ms + eps)
    inv = inv.astype(x.dtype, copy=False)
    return x * inv[:, None] * gain, inv


def rms_norm_bwd(dy, x, gain, inv):
    d = x.shape[1]
    xhat = x * inv[:, None]
    dgain = np.einsum("ij,ij->j", dy, xhat)
    g = dy * gain
    dot = np.einsum("ij,ij->i", g, xhat) / d
    dx = inv[:, None] * (g - xhat * dot[:, None])
    return dx, dgain


def swiglu_fwd(x):
    """silu(x[:, :f]) * x[:, f:] for a 2-D array with 2f columns."""
    f = x.shape[1] // 2
    a, b = x[:, :f], x[:, f:]
    sig = 1.0 / (1.0 + np.exp(-a))
    return a * sig * b


def swiglu_bwd(dy, x):
    f = x.shape[1] // 2
    a, b = x[:, :f], x[:, f:]
    sig = 1.0 / (1.0 + np.exp(-a))
    silu = a * sig
    dx = np.empty_like(x)
    dx[:, :f] = dy * b * (sig * (1.0 + a * (1.0 - sig)))
    dx[:, f:] = dy * silu
    return dx


def cross_entropy(logits, targets, ignore_index):
    """Mean token cross-entropy over rows whose target is not ignored.

    Returns (loss, count, dlogits) where dlogits is the gradient of the mean
    loss. An all-ignored input gives loss 0 and a zero gradient.
    """
    rows, vocab = logits.shape
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(targets[bad][0])} outside [0, {vocab})")
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, 0, grad
    z = logits[valid]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    tv = targets[valid]
    logp = z[np.arange(count), tv] - np.log(s[:, 0])
    p = e / s
    p[np.arange(count), tv] -= 1.0
    grad[valid] = p / count
    return float(-logp.sum() / count), count, grad


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place decoupled-weight-decay Adam update of ``param``."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    if weight_decay:
        param -= lr * weight_decay * param
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def levenshtein(a, b):
    """Unit-cost edit distance between two int64 sequences."""
    a = [int(t) for t in a]
    b = [int(t) for t in b]
    n = len(b)
    prev = list(range(n + 1))
    for i, ai in enumerate(a, 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            cost = 0 if ai == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[n]
