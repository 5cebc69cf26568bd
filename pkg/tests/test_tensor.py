import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stylemt.errors import DimensionError, GraphError, NumericError
from stylemt.layers import Linear, ReLU, Sequential
from stylemt.tensor import (Tensor, default_dtype, grad_check, matmul, precision, softmax_backward,
                            softmax_lastdim)


def test_default_dtype_is_float32_and_precision_scopes():
    assert default_dtype() is np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_tensor_rejects_empty_dimension():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_accumulate_checks_shape():
    t = Tensor(np.zeros((2, 3)))
    t.accumulate(np.ones((2, 3)))
    t.accumulate(np.ones((2, 3)))
    assert np.all(t.grad == 2)
    with pytest.raises(DimensionError):
        t.accumulate(np.ones((3, 2)))


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform_and_temperature():
    y = softmax_lastdim(np.zeros((2, 5)))
    assert np.allclose(y, 0.2)
    with pytest.raises(ValueError):
        softmax_lastdim(np.zeros(3), temperature=0.0)
    with pytest.raises(NumericError):
        softmax_lastdim(np.array([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_is_distribution_and_shift_invariant(x):
    y = softmax_lastdim(x)
    assert np.all(y >= 0)
    assert np.allclose(y.sum(-1), 1.0, atol=1e-12)
    assert np.allclose(softmax_lastdim(x + 7.5), y, atol=1e-12)


def test_softmax_backward_matches_finite_differences(rng):
    x = rng.normal(size=(2, 4))
    dy = rng.normal(size=(2, 4))
    for tau in (1.0, 0.5):
        y = softmax_lastdim(x, tau)
        g = softmax_backward(y, dy, tau)
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = 1e-6
            num[idx] = ((softmax_lastdim(x + e, tau) - softmax_lastdim(x - e, tau)) * dy).sum() / 2e-6
        assert np.max(np.abs(g - num)) < 1e-7


def test_backward_twice_without_forward_raises():
    lin = Linear(3, 2)
    lin(np.ones((1, 3), dtype=np.float32))
    lin.backward(np.ones((1, 2), dtype=np.float32))
    with pytest.raises(GraphError):
        lin.backward(np.ones((1, 2), dtype=np.float32))


def test_module_parameter_walk_and_counts():
    net = Sequential(Linear(4, 3), ReLU(), Linear(3, 2, bias=False))
    names = [n for n, _ in net.named_parameters()]
    assert names == ["layers.0.weight", "layers.0.bias", "layers.2.weight"]
    assert net.num_parameters() == 4 * 3 + 3 + 3 * 2


def test_grad_check_detects_a_wrong_gradient(rng):
    with precision(np.float64):
        w = Tensor(rng.normal(size=3))

    def good():
        w.grad = None
        w.accumulate(2 * w.data)
        return float((w.data ** 2).sum())

    def bad():
        w.grad = None
        w.accumulate(3 * w.data)
        return float((w.data ** 2).sum())

    assert grad_check(good, {"w": w}).ok(1e-6)
    assert not grad_check(bad, {"w": w}).ok(1e-2)
