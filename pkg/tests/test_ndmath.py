import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moecollab.exceptions import LabelError, NumericError, ShapeError
from moecollab.ndmath import (Param, as_tensor2, cross_entropy_logits, linear, linear_backward,
                              matmul, relu, relu_backward, softmax_rows, softmax_rows_backward)
from moecollab.train import grad_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_as_tensor2_promotes_vectors_and_rejects_bad_rank():
    assert as_tensor2([1, 2, 3]).shape == (1, 3)
    with pytest.raises(ShapeError):
        as_tensor2(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        as_tensor2(np.zeros((0, 3)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_param_grad_shape_checked():
    with pytest.raises(ShapeError):
        Param(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(np.float64, (5, 4), elements=finite))
def test_softmax_rows_on_simplex(a):
    p = softmax_rows(a)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite), finite)
def test_softmax_shift_invariance(a, c):
    np.testing.assert_allclose(softmax_rows(a), softmax_rows(a + c), atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    p = softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        softmax_rows(np.array([[np.nan, 1.0]]))


def test_softmax_backward_against_jacobian(rng):
    z = rng.normal(size=(1, 5))
    p = softmax_rows(z)[0]
    jac = np.diag(p) - np.outer(p, p)
    g = rng.normal(size=(1, 5))
    np.testing.assert_allclose(softmax_rows_backward(p[None], g)[0], jac.T @ g[0], atol=1e-14)


def test_relu_and_backward():
    x = np.array([[-1.0, 0.0, 2.0]])
    np.testing.assert_array_equal(relu(x), [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(relu_backward(x, np.ones_like(x)), [[0.0, 0.0, 1.0]])


def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy_logits(np.zeros((2, 4)), [0, 3])
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_cross_entropy_label_error_names_row():
    with pytest.raises(LabelError, match="row 1"):
        cross_entropy_logits(np.zeros((2, 3)), [0, 3])


def test_cross_entropy_gradient_matches_finite_differences(rng):
    logits = Param(rng.normal(size=(4, 3)))
    labels = rng.integers(0, 3, 4)

    def evaluate():
        loss, g = cross_entropy_logits(logits.value, labels)
        logits.grad += g
        return loss

    assert grad_check(evaluate, [logits]) <= 1e-6


def test_linear_backward_quadratic_grad_check(rng):
    x = rng.normal(size=(3, 4))
    W, b = Param(rng.normal(size=(4, 2))), Param(rng.normal(size=(1, 2)))

    def evaluate():
        out = linear(x, W, b)
        linear_backward(x, W, b, out)  # d/dout of 0.5*||out||^2
        return 0.5 * float(np.sum(out ** 2))

    assert grad_check(evaluate, [W, b]) <= 1e-8


def test_linear_backward_without_accumulate_leaves_grads():
    W, b = Param(np.ones((2, 2))), Param(np.zeros((1, 2)))
    g_in = linear_backward(np.ones((1, 2)), W, b, np.ones((1, 2)), accumulate=False)
    np.testing.assert_array_equal(g_in, [[2.0, 2.0]])
    assert not W.grad.any() and not b.grad.any()
