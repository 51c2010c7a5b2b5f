import math

import numpy as np
import pytest

from mtpslab.errors import ConfigError, ContractError, InvalidMaskError, NumericError, ShapeError
from mtpslab.numerics import AdamState, Tensor, adam_step, backward, clip_grad_norm, no_grad
from mtpslab.numerics import functional as F

from helpers import gradient_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    out = F.matmul(Tensor(np.eye(2)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_product():
    out = F.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[1.0], [1.0]])))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_zeros():
    out = F.matmul(Tensor(np.zeros((3, 4))), Tensor(np.random.default_rng(0).normal(size=(4, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        F.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


def test_matmul_dtype_mismatch():
    with pytest.raises(ShapeError):
        F.matmul(Tensor(np.zeros((2, 2), np.float32)), Tensor(np.zeros((2, 2), np.float64)))


def test_matmul_gradient_rules():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    dc = rng.normal(size=(3, 2))
    backward(F.sum(F.mul(F.matmul(a, b), Tensor(dc))))
    np.testing.assert_allclose(a.grad, dc @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ dc, rtol=1e-12)


# -- masked softmax ---------------------------------------------------------------

def test_softmax_uniform_over_unmasked():
    mask = np.array([[True, False, True, True, False]])
    p = F.masked_softmax(Tensor(np.zeros((1, 5))), mask).data
    np.testing.assert_allclose(p[0, mask[0]], 1 / 3, rtol=1e-15)
    assert np.all(p[0, ~mask[0]] == 0.0)


def test_softmax_single_survivor():
    p = F.masked_softmax(Tensor(np.zeros((1, 2))), np.array([[True, False]])).data
    np.testing.assert_array_equal(p, [[1.0, 0.0]])


def test_softmax_hand_values():
    p = F.masked_softmax(Tensor(np.array([[math.log(1), math.log(3)]])), np.ones((1, 2), bool)).data
    np.testing.assert_allclose(p, [[0.25, 0.75]], atol=1e-15)


def test_softmax_rows_sum_to_one_and_masked_exact_zero():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=30, size=(200, 17))
    mask = rng.random((200, 17)) < 0.5
    mask[:, 3] = True
    p = F.masked_softmax(Tensor(x), mask).data
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-9)
    assert np.all(p[~mask] == 0.0)


def test_softmax_all_masked_row():
    with pytest.raises(InvalidMaskError):
        F.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


# -- rms norm ---------------------------------------------------------------------

def test_rms_norm_constant_vector():
    y = F.rms_norm(Tensor(np.full((1, 8), 2.5)), Tensor(np.ones(8))).data
    np.testing.assert_allclose(y, 1.0, atol=1e-6)


def test_rms_norm_zero_vector():
    y = F.rms_norm(Tensor(np.zeros((1, 4))), Tensor(np.ones(4))).data
    np.testing.assert_array_equal(y, np.zeros((1, 4)))


def test_rms_norm_hand_values():
    y = F.rms_norm(Tensor(np.array([[3.0, 4.0]])), Tensor(np.ones(2))).data
    np.testing.assert_allclose(y, [[3 / math.sqrt(12.5 + 1e-6), 4 / math.sqrt(12.5 + 1e-6)]], rtol=1e-15)
    np.testing.assert_allclose(y, [[0.8485, 1.1314]], atol=1e-4)


# -- rotary -----------------------------------------------------------------------

def test_rotary_position_zero_is_identity():
    x = np.random.default_rng(3).normal(size=(5, 2, 8))
    out = F.rotary_apply(Tensor(x), np.zeros(5, dtype=int)).data
    np.testing.assert_array_equal(out, x)


def test_rotary_preserves_pair_norms():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 3, 16))
    out = F.rotary_apply(Tensor(x), rng.integers(0, 500, size=7)).data
    n_in = np.hypot(x[..., 0::2], x[..., 1::2])
    n_out = np.hypot(out[..., 0::2], out[..., 1::2])
    assert np.max(np.abs(n_in - n_out)) <= 1e-12


def test_rotary_hand_value():
    out = F.rotary_apply(Tensor(np.array([[[1.0, 0.0]]])), np.array([1])).data
    np.testing.assert_allclose(out[0, 0], [math.cos(1), math.sin(1)], rtol=1e-15)
    np.testing.assert_allclose(out[0, 0], [0.5403, 0.8415], atol=1e-4)


def test_rotary_odd_head_dim():
    with pytest.raises(ConfigError):
        F.rotary_apply(Tensor(np.zeros((2, 1, 3))), np.arange(2))


# -- cross entropy ----------------------------------------------------------------

def test_cross_entropy_certain_prediction():
    logits = np.zeros((3, 5))
    targets = np.array([1, 4, 0])
    logits[np.arange(3), targets] = 1e4
    assert F.cross_entropy(Tensor(logits), targets).item() < 1e-12


def test_cross_entropy_uniform():
    loss = F.cross_entropy(Tensor(np.zeros((6, 4))), np.array([0, 1, 2, 3, 0, 1]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_all_ignored_is_zero_with_zero_grad():
    x = leaf(np.random.default_rng(5).normal(size=(4, 3)))
    loss = F.cross_entropy(x, np.full(4, -100), -100)
    assert loss.item() == 0.0
    backward(loss)
    assert np.all(x.grad == 0.0)


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        F.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(6)
    x = leaf(rng.normal(size=(4, 5)))
    t = np.array([0, 2, -100, 4])
    backward(F.cross_entropy(x, t, -100))
    p = np.exp(x.data - x.data.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expect = p.copy()
    keep = t != -100
    expect[np.arange(4)[keep], t[keep]] -= 1
    expect[~keep] = 0
    np.testing.assert_allclose(x.grad, expect / keep.sum(), atol=1e-15)


# -- backward ---------------------------------------------------------------------

def test_backward_sum():
    x = leaf([1.0, -2.0, 3.0])
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = leaf([1.0, 2.0])
    backward(F.sum(F.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_zero_grad():
    x = leaf([1.0, 2.0])
    backward(F.sum(F.mul(x, x)))
    backward(F.sum(F.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        backward(F.mul(leaf([1.0, 2.0]), 2.0))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = F.mul(x, 3.0)
    assert y.entry is None and not y.requires_grad


def test_shared_subexpression_gradient():
    x = leaf([0.5, -1.5])
    y = F.mul(x, x)
    backward(F.sum(F.add(y, F.mul(y, x))))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data ** 2, rtol=1e-15)


@pytest.mark.parametrize("op", ["rms_norm", "swiglu", "attention", "embedding", "concat_getitem"])
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(7)
    if op == "rms_norm":
        params = {"x": leaf(rng.normal(size=(3, 6))), "g": leaf(rng.normal(size=6))}
        proj = rng.normal(size=(3, 6))
        fn = lambda: F.sum(F.mul(F.rms_norm(params["x"], params["g"]), Tensor(proj)))  # noqa: E731
    elif op == "swiglu":
        params = {"x": leaf(rng.normal(size=(4, 8)))}
        proj = rng.normal(size=(4, 4))
        fn = lambda: F.sum(F.mul(F.swiglu(params["x"]), Tensor(proj)))  # noqa: E731
    elif op == "attention":
        params = {"qkv": leaf(rng.normal(size=(2, 5, 24)))}
        mask = np.tril(np.ones((5, 5), bool))[None].repeat(2, 0)
        mask[1, 4, :2] = False
        pos = np.arange(5)[None].repeat(2, 0)
        proj = rng.normal(size=(2, 5, 8))
        fn = lambda: F.sum(F.mul(F.attention(params["qkv"], mask, pos, 2), Tensor(proj)))  # noqa: E731
    elif op == "embedding":
        params = {"w": leaf(rng.normal(size=(7, 3)))}
        ids = np.array([[1, 4, 1], [6, 0, 4]])
        proj = rng.normal(size=(2, 3, 3))
        fn = lambda: F.sum(F.mul(F.embedding(params["w"], ids), Tensor(proj)))  # noqa: E731
    else:
        params = {"a": leaf(rng.normal(size=(2, 3))), "b": leaf(rng.normal(size=(2, 2)))}
        proj = rng.normal(size=(2, 3))
        fn = lambda: F.sum(F.mul(F.concat([params["a"], params["b"]], 1)[:, 1:4], Tensor(proj)))  # noqa: E731
    worst, n = gradient_check(fn, params, 50, rng)
    assert n > 0
    assert worst <= 1e-4


# -- adam -------------------------------------------------------------------------

def test_adam_first_step_is_sign_step():
    p = leaf([1.0, -2.0, 0.5])
    p.grad = np.array([0.3, -4.0, 1e-3])
    st = AdamState(lr=0.01)
    adam_step(st, {"p": p})
    np.testing.assert_allclose(p.data - np.array([1.0, -2.0, 0.5]), -0.01 * np.sign([0.3, -4.0, 1e-3]), rtol=1e-4)
    assert st.t == 1


def test_adam_matches_reference_update():
    rng = np.random.default_rng(8)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(3)]
    p = leaf(p0.copy())
    st = AdamState(lr=0.1, weight_decay=0.01)
    ref, m, v = p0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        adam_step(st, {"p": p})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.01 * ref)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)
    assert st.t == 3


def test_adam_zero_grad_leaves_params():
    p = leaf([1.0, 2.0])
    p.grad = np.zeros(2)
    adam_step(AdamState(lr=0.5), {"p": p})
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_nan_names_parameter():
    p = leaf([1.0, 2.0])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="weights"):
        adam_step(AdamState(), {"weights": p})


def test_clip_grad_norm():
    a, b = leaf([0.0]), leaf([0.0, 0.0])
    a.grad, b.grad = np.array([3.0]), np.array([0.0, 4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-10)
