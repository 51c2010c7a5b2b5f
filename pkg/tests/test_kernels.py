import os
import subprocess
import sys

import numpy as np
import pytest

from mtpslab import _fallback, kernels
from mtpslab.errors import InvalidMaskError

compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")

TOL = {np.float64: 1e-12, np.float32: 2e-5}


def run_both(name, *args):
    outs = []
    for backend in ("python", "compiled"):
        with kernels.use_backend(backend):
            copies = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
            outs.append((getattr(kernels, name)(*copies), copies))
    return outs


def close(a, b, tol):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            close(x, y, tol)
        return
    np.testing.assert_allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=tol, atol=tol)


@compiled
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_backend_parity(dtype):
    rng = np.random.default_rng(0)
    tol = TOL[dtype]
    x = rng.normal(scale=3, size=(37, 24)).astype(dtype)
    mask = rng.random((37, 24)) < 0.6
    mask[:, 0] = True
    (p1, _), (p2, _) = run_both("masked_softmax", x, mask)
    close(p1, p2, tol)
    assert np.all(p2[~mask] == 0.0)
    dp = rng.normal(size=x.shape).astype(dtype)
    close(*[o for o, _ in run_both("softmax_backward", p1, dp)], tol)
    gain = rng.normal(size=24).astype(dtype)
    (f1, _), (f2, _) = run_both("rms_norm_fwd", x, gain, 1e-6)
    close(f1, f2, tol)
    close(*[o for o, _ in run_both("rms_norm_bwd", dp, x, gain, f1[1])], tol * 10)
    close(*[o for o, _ in run_both("swiglu_fwd", x)], tol)
    close(*[o for o, _ in run_both("swiglu_bwd", dp[:, :12].copy(), x)], tol)
    targets = rng.integers(0, 24, size=37)
    targets[::5] = -100
    (c1, _), (c2, _) = run_both("cross_entropy", x, targets, -100)
    assert c1[1] == c2[1]
    close(c1[0], c2[0], tol)
    close(c1[2], c2[2], tol)
    m, v = np.abs(rng.normal(size=50)).astype(dtype), np.abs(rng.normal(size=50)).astype(dtype)
    param, grad = rng.normal(size=50).astype(dtype), rng.normal(size=50).astype(dtype)
    outs = run_both("adam_update", param, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)
    for i in (0, 2, 3):
        close(outs[0][1][i], outs[1][1][i], tol)


@compiled
def test_levenshtein_parity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rng.integers(0, 4, size=rng.integers(0, 12))
        b = rng.integers(0, 4, size=rng.integers(0, 12))
        assert kernels.levenshtein(a, b) == _fallback.levenshtein(a, b)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_kernel_contracts(backend):
    with kernels.use_backend(backend):
        assert kernels.levenshtein([1, 2, 3], [1, 3]) == 1
        assert kernels.levenshtein([], [5, 6]) == 2
        with pytest.raises(InvalidMaskError):
            kernels.masked_softmax(np.zeros((2, 3)), np.array([[True] * 3, [False] * 3]))
        with pytest.raises(IndexError):
            kernels.cross_entropy(np.zeros((1, 3)), np.array([7]), -100)
        # masked scores larger than the row maximum must not overflow
        p = kernels.masked_softmax(np.array([[0.0, 1e4]]), np.array([[True, False]]))
        assert p.tolist() == [[1.0, 0.0]]
        # a NaN score poisons its row instead of looking like an empty mask
        with np.errstate(invalid="ignore"):
            p = kernels.masked_softmax(np.array([[np.nan, 1.0], [0.0, 0.0]]), np.ones((2, 2), dtype=bool))
        assert np.isnan(p[0]).all() and p[1].tolist() == [0.5, 0.5]


def test_use_backend_restores():
    before = kernels.BACKEND
    with kernels.use_backend("python"):
        assert kernels.BACKEND == "python"
    assert kernels.BACKEND == before
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_env_var_forces_fallback():
    env = dict(os.environ, MTPSLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import mtpslab; print(mtpslab.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
