# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same contracts as ``mtpslab._fallback``."""

import numpy as np

from libc.math cimport exp, sqrt, log, INFINITY
from cython cimport floating

from .errors import InvalidMaskError


def masked_softmax(floating[:, ::1] scores, mask):
    cdef const unsigned char[:, ::1] mk = mask.view(np.uint8)
    cdef Py_ssize_t rows = scores.shape[0], n = scores.shape[1], i, j
    mx_arr = np.empty((rows, 1), dtype=np.asarray(scores).dtype)
    cdef floating[:, ::1] mxv = mx_arr
    cdef double mx, s, v
    cdef Py_ssize_t seen
    with nogil:
        for i in range(rows):
            mx = -INFINITY
            seen = 0
            for j in range(n):
                if mk[i, j]:
                    seen += 1
                    v = scores[i, j]
                    # NaN wins so it propagates like the numpy path
                    if v > mx or v != v:
                        mx = v
                        if v != v:
                            break
            if seen == 0:
                with gil:
                    raise InvalidMaskError("masked_softmax: a row has no visible entries")
            mxv[i, 0] = <floating>mx
    # vectorised exponential (masked entries above the row max are clamped
    # so they cannot overflow; they are zeroed below), then mask/normalise
    out_arr = np.subtract(scores, mx_arr)
    np.minimum(out_arr, 0, out=out_arr)
    np.exp(out_arr, out=out_arr)
    cdef floating[:, ::1] out = out_arr
    with nogil:
        for i in range(rows):
            s = 0.0
            for j in range(n):
                if mk[i, j]:
                    s += out[i, j]
                else:
                    out[i, j] = 0.0
            s = 1.0 / s
            for j in range(n):
                out[i, j] = <floating>(out[i, j] * s)
    return out_arr


def softmax_backward(floating[:, ::1] p, floating[:, ::1] dp):
    cdef Py_ssize_t rows = p.shape[0], n = p.shape[1], i, j
    out_arr = np.empty((rows, n), dtype=np.asarray(p).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += p[i, j] * dp[i, j]
            for j in range(n):
                out[i, j] = <floating>(p[i, j] * (dp[i, j] - dot))
    return out_arr


def rms_norm_fwd(floating[:, ::1] x, floating[::1] gain, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    dt = np.asarray(x).dtype
    y_arr = np.empty((rows, d), dtype=dt)
    inv_arr = np.empty(rows, dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] inv = inv_arr
    cdef double ms, r
    with nogil:
        for i in range(rows):
            ms = 0.0
            for j in range(d):
                ms += x[i, j] * x[i, j]
            r = 1.0 / sqrt(ms / d + eps)
            inv[i] = <floating>r
            for j in range(d):
                y[i, j] = <floating>(x[i, j] * inv[i] * gain[j])
    return y_arr, inv_arr


def rms_norm_bwd(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] gain, floating[::1] inv):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    dt = np.asarray(x).dtype
    dx_arr = np.empty((rows, d), dtype=dt)
    dg_arr = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double dot, xh, r
    with nogil:
        for i in range(rows):
            r = inv[i]
            dot = 0.0
            for j in range(d):
                xh = x[i, j] * r
                dg[j] += dy[i, j] * xh
                dot += dy[i, j] * gain[j] * xh
            dot /= d
            for j in range(d):
                dx[i, j] = <floating>(r * (dy[i, j] * gain[j] - x[i, j] * r * dot))
    return dx_arr, dg_arr.astype(dt, copy=False)


def swiglu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], f = x.shape[1] // 2, i, j
    xa = np.asarray(x)
    e_arr = np.exp(np.negative(xa[:, :f]))
    cdef floating[:, ::1] e = e_arr
    y_arr = np.empty((rows, f), dtype=xa.dtype)
    cdef floating[:, ::1] y = y_arr
    with nogil:
        for i in range(rows):
            for j in range(f):
                y[i, j] = x[i, j] / (1 + e[i, j]) * x[i, f + j]
    return y_arr


def swiglu_bwd(floating[:, ::1] dy, floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], f = x.shape[1] // 2, i, j
    xa = np.asarray(x)
    e_arr = np.exp(np.negative(xa[:, :f]))
    cdef floating[:, ::1] e = e_arr
    dx_arr = np.empty((rows, 2 * f), dtype=xa.dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef floating a, b, sig
    with nogil:
        for i in range(rows):
            for j in range(f):
                a = x[i, j]
                b = x[i, f + j]
                sig = 1 / (1 + e[i, j])
                dx[i, j] = dy[i, j] * b * (sig * (1 + a * (1 - sig)))
                dx[i, f + j] = dy[i, j] * (a * sig)
    return dx_arr


def cross_entropy(floating[:, ::1] logits, long long[::1] targets, long long ignore_index):
    cdef Py_ssize_t rows = logits.shape[0], vocab = logits.shape[1], i, j
    cdef long long t
    cdef Py_ssize_t count = 0
    for i in range(rows):
        t = targets[i]
        if t == ignore_index:
            continue
        if t < 0 or t >= vocab:
            raise IndexError(f"cross_entropy: target {t} outside [0, {vocab})")
        count += 1
    dt = np.asarray(logits).dtype
    if count == 0:
        return 0.0, 0, np.zeros((rows, vocab), dtype=dt)
    mx_arr = np.empty((rows, 1), dtype=dt)
    cdef floating[:, ::1] mxv = mx_arr
    with nogil:
        for i in range(rows):
            mxv[i, 0] = logits[i, 0]
            for j in range(1, vocab):
                if logits[i, j] > mxv[i, 0]:
                    mxv[i, 0] = logits[i, j]
    # vectorised exponential, then per-row normalisation in a single pass
    grad_arr = np.subtract(logits, mx_arr)
    np.exp(grad_arr, out=grad_arr)
    cdef floating[:, ::1] grad = grad_arr
    cdef double s, total = 0.0, scale = 1.0 / count
    with nogil:
        for i in range(rows):
            t = targets[i]
            if t == ignore_index:
                for j in range(vocab):
                    grad[i, j] = 0.0
                continue
            s = 0.0
            for j in range(vocab):
                s += grad[i, j]
            total += log(s) - (logits[i, t] - mxv[i, 0])
            s = scale / s
            for j in range(vocab):
                grad[i, j] = <floating>(grad[i, j] * s)
            grad[i, t] = <floating>(grad[i, t] - scale)
    return total / count, count, grad_arr


def adam_update(floating[::1] param, floating[::1] grad, floating[::1] m, floating[::1] v,
                double lr, double beta1, double beta2, double eps, double weight_decay,
                double bc1, double bc2):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m[i] = <floating>mi
            v[i] = <floating>vi
            if weight_decay != 0.0:
                param[i] = <floating>(param[i] - lr * weight_decay * param[i])
            param[i] = <floating>(param[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps))


def levenshtein(a, b):
    cdef long long[::1] x = np.ascontiguousarray(a, dtype=np.int64)
    cdef long long[::1] y = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0], k = y.shape[0], i, j
    row_arr = np.arange(k + 1, dtype=np.int64)
    cdef long long[::1] row = row_arr
    cdef long long diag, up, best
    with nogil:
        for i in range(1, n + 1):
            diag = row[0]
            row[0] = i
            for j in range(1, k + 1):
                up = row[j]
                best = diag + (0 if x[i - 1] == y[j - 1] else 1)
                if up + 1 < best:
                    best = up + 1
                if row[j - 1] + 1 < best:
                    best = row[j - 1] + 1
                row[j] = best
                diag = up
    return int(row[k])
