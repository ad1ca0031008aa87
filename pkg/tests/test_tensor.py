import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualseg import tensor as T
from dualseg.errors import ArgumentError, StateError
from dualseg.gradcheck import check_gradients, relative_error
from dualseg.tensor import ParamSet, Tensor

from oracles import OP_KINDS, op_case


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    out = T.softmax(Tensor(np.zeros(4)), axis=0).data
    np.testing.assert_array_equal(out, np.full(4, 0.25))


def test_softmax_shift_invariance():
    a = T.softmax(Tensor([1.0, 2.0, 3.0]), 0).data
    b = T.softmax(Tensor([11.0, 12.0, 13.0]), 0).data
    assert np.abs(a - b).max() <= 1e-12


def test_softmax_closed_form():
    out = T.softmax(Tensor([0.0, math.log(2.0)]), 0).data
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_softmax_large_logits_stay_finite():
    out = T.softmax(Tensor([1000.0, 0.0, -1000.0]), 0).data
    assert np.isfinite(out).all() and abs(out.sum() - 1) < 1e-12


@pytest.mark.parametrize("axis", [2, -3])
def test_softmax_axis_out_of_range(axis):
    with pytest.raises(ArgumentError):
        T.softmax(Tensor(np.zeros((2, 3))), axis)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 9))
@settings(max_examples=60)
def test_softmax_rows_sum_to_one(seed, n, c):
    x = np.random.default_rng(seed).normal(scale=20, size=(n, c))
    out = T.softmax(Tensor(x), -1).data
    assert np.abs(out.sum(-1) - 1).max() <= 1e-9
    assert (out > 0).all()
    shifted = T.softmax(Tensor(x + 7.5), -1).data
    assert np.abs(out - shifted).max() <= 1e-12


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_saturated_correct():
    logits = np.zeros((3, 4))
    labels = np.array([0, 2, 3])
    logits[np.arange(3), labels] = 30.0
    assert T.cross_entropy(Tensor(logits), labels, 4).data < 1e-9


def test_cross_entropy_uniform_twenty_classes():
    loss = T.cross_entropy(Tensor(np.zeros((5, 20))), np.arange(5), 20).data
    assert abs(loss - math.log(20)) < 1e-12
    assert round(float(loss), 5) == 2.99573


def test_cross_entropy_all_ignored_is_exact_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    loss = T.cross_entropy(x, np.full(4, 3), 3)
    assert loss.data == 0.0
    T.backward(loss)
    assert not x.grad.any()


def test_cross_entropy_ignores_masked_rows():
    x = np.random.default_rng(1).normal(size=(4, 3))
    full = T.cross_entropy(Tensor(x[:2]), np.array([0, 1]), 3).data
    masked = T.cross_entropy(Tensor(x), np.array([0, 1, 3, 3]), 3).data
    assert full == pytest.approx(masked, abs=1e-15)


@pytest.mark.parametrize("bad", [4, 7, -1])
def test_cross_entropy_rejects_bad_labels(bad):
    with pytest.raises(ArgumentError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, bad]), 3)


# ---------------------------------------------------------------- backward

def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    T.backward(T.mul(x, x))
    assert x.grad == 6.0


def test_constant_gradient_is_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.add(T.tsum(T.mul(x, 0.0)), 5.0))
    np.testing.assert_array_equal(x.grad, 0.0)


def test_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ArgumentError):
        T.backward(T.mul(x, 2.0))


def test_cycle_is_an_internal_error():
    x = Tensor(2.0, requires_grad=True)
    y = T.mul(x, x)
    x._parents = (y,)
    with pytest.raises(RuntimeError):
        T.backward(y)


def test_repeated_backward_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_reused_tensor_sums_path_gradients(rng):
    # f = sum(x*w) + sum(x*x) against the single-use rewrite sum(x*(w+x))
    x, w = param(rng, 5), param(rng, 5)
    T.backward(T.add(T.tsum(T.mul(x, w)), T.tsum(T.mul(x, x))))
    gx, gw = x.grad.copy(), w.grad.copy()
    x2, w2 = Tensor(x.data, requires_grad=True), Tensor(w.data, requires_grad=True)
    T.backward(T.tsum(T.mul(x2, T.add(w2, Tensor(x.data)))))
    np.testing.assert_allclose(gx, x2.grad + x.data, rtol=0, atol=1e-14)
    np.testing.assert_allclose(gw, w2.grad, rtol=0, atol=1e-14)


def test_no_graph_without_grad():
    a = Tensor(np.ones(3))
    out = T.mul(T.add(a, a), a)
    assert not out.requires_grad and out._parents == ()


def test_two_layer_perceptron_gradients(rng):
    x = Tensor(rng.normal(size=(6, 5)))
    w1, b1, w2, b2 = param(rng, 5, 8), param(rng, 8), param(rng, 8, 3), param(rng, 3)
    labels = rng.integers(0, 3, 6)

    def f():
        h = T.relu(T.add(T.matmul(x, w1), b1))
        return T.cross_entropy(T.add(T.matmul(h, w2), b2), labels, 3)

    assert check_gradients(f, [w1, b1, w2, b2]) <= 1e-4


# ---------------------------------------------------------------- randomized op gradient property

@given(st.sampled_from(OP_KINDS), st.integers(0, 2**31 - 1))
@settings(max_examples=150)
def test_every_op_matches_finite_differences(kind, seed):
    fn, inputs = op_case(kind, np.random.default_rng(seed))
    assert check_gradients(fn, inputs, h=1e-5) <= 1e-4


# ---------------------------------------------------------------- determinism

def test_ops_are_bitwise_deterministic(rng):
    x = rng.normal(size=(1, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    a = T.softmax(T.conv(Tensor(x), Tensor(w)), -1).data
    b = T.softmax(T.conv(Tensor(x), Tensor(w)), -1).data
    assert a.tobytes() == b.tobytes()


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 5, 4, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    out = T.conv(Tensor(x), Tensor(w)).data
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 4, 3))
    for i in range(5):
        for j in range(4):
            ref[0, i, j] = np.einsum("abc,abcd->d", pad[0, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- ParamSet and SGD

def _params(value, grad):
    p = ParamSet({"w": Tensor(np.array([value]), requires_grad=True)})
    p["w"].grad = np.array([grad])
    return p


def test_sgd_closed_form():
    p = T.sgd_step(_params(1.0, 0.5), 0.01)
    assert p["w"].data[0] == pytest.approx(0.995, abs=1e-15)
    assert p["w"].grad[0] == 0.0


def test_sgd_zero_lr_is_identity():
    p = T.sgd_step(_params(1.25, 3.0), 0.0)
    assert p["w"].data[0] == 1.25


def test_sgd_two_steps_constant_grad():
    p = _params(1.0, 0.5)
    T.sgd_step(p, 0.01)
    p["w"].grad = np.array([0.5])
    T.sgd_step(p, 0.01)
    assert p["w"].data[0] == pytest.approx(1.0 - 2 * 0.01 * 0.5, abs=1e-15)


def test_sgd_missing_grad_is_state_error():
    p = ParamSet({"w": Tensor(np.ones(2), requires_grad=True)})
    with pytest.raises(StateError):
        T.sgd_step(p, 0.1)


def test_sgd_momentum_accumulates_velocity():
    p, vel = _params(0.0, 1.0), {}
    T.sgd_step(p, 0.1, momentum=0.9, velocity=vel)
    p["w"].grad = np.array([1.0])
    T.sgd_step(p, 0.1, momentum=0.9, velocity=vel)
    assert p["w"].data[0] == pytest.approx(-0.1 - 0.1 * 1.9, abs=1e-15)


def test_paramset_shape_compatibility():
    a = ParamSet({"x": Tensor(np.zeros((2, 3))), "y": Tensor(np.zeros(3))})
    assert a.shape_compatible(a.copy())
    b = ParamSet({"x": Tensor(np.zeros((3, 2))), "y": Tensor(np.zeros(3))})
    assert not a.shape_compatible(b)
    c = ParamSet({"y": Tensor(np.zeros(3)), "x": Tensor(np.zeros((2, 3)))})
    assert not a.shape_compatible(c)


def test_paramset_rejects_non_tensor():
    with pytest.raises(ArgumentError):
        ParamSet()["w"] = np.zeros(2)


def test_relative_error_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0])) <= 1e-5
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) == pytest.approx(1e-6, rel=1e-3)
