import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradutil import check_module
from stylemt.errors import DimensionError
from stylemt.layers import (GELU, BatchNorm2d, Conv2d, LayerNorm, LeakyReLU, Linear, ReLU, Sigmoid, conv2d,
                            conv_output_size)
from stylemt.tensor import precision


def naive_conv(x, w, b, stride, pad):
    """Direct seven-loop convolution used as the oracle."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, ho, wo), dtype=x.dtype)
    for n in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    acc = 0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + (b[o] if b is not None else 0)
    return out


X4 = np.array([[[[1., 2, 0, -1], [3, -2, 1, 0], [0, 1, 2, 3], [-1, 0, 1, 2]]]])
W3 = np.array([[[[1., 0, -1], [2, 1, 0], [0, -1, 1]]]])


def test_conv_frozen_values():
    # reference values from an independent framework, frozen
    assert conv2d(X4, W3, np.array([0.5]), stride=2, padding=1).ravel().tolist() == [-3.5, 3.5, 3.5, 3.5]
    assert conv2d(X4, W3, None, stride=1, padding=0).ravel().tolist() == [6.0, 1.0, 4.0, 3.0]


@pytest.mark.parametrize("k,s,p", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (4, 4, 0), (2, 2, 0), (5, 3, 2)])
def test_conv_matches_naive_loop_bit_exactly_on_integers(k, s, p):
    rng = np.random.default_rng(k * 100 + s * 10 + p)
    x = rng.integers(-4, 5, size=(2, 3, 9, 8)).astype(np.float64)
    w = rng.integers(-3, 4, size=(4, 3, k, k)).astype(np.float64)
    b = rng.integers(-2, 3, size=4).astype(np.float64)
    got = conv2d(x, w, b, s, p)
    assert np.array_equal(got, naive_conv(x, w, b, s, p))


def test_conv_matches_naive_loop_on_floats(rng):
    x, w = rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(3, 2, 3, 3))
    assert np.allclose(conv2d(x, w, None, 2, 1), naive_conv(x, w, None, 2, 1), atol=1e-12)


def test_conv_output_size_and_shape_error():
    assert conv_output_size(64, 4, 4, 0) == 16
    assert conv_output_size(64, 3, 2, 1) == 32
    conv = Conv2d(3, 4, 3)
    with pytest.raises(DimensionError):
        conv(np.zeros((1, 2, 8, 8), dtype=np.float32))
    with pytest.raises(DimensionError):
        conv(np.zeros((1, 3, 2, 2), dtype=np.float32))


def test_batchnorm_frozen_values():
    x = np.array([[[[1., 2], [3, 4]], [[0, -1], [2, 5]]], [[[2., 0], [1, 1]], [[3, 3], [-2, 0]]]])
    with precision(np.float64):
        bn = BatchNorm2d(2)
    y = bn(x)
    ref = [-0.6255410663799946, 0.20851368879333165, 1.0425684439666578, 1.8766231991399842,
           -0.5625433807991174, -1.0125780854384112, 0.33752602847947033, 1.6876301423973519,
           0.20851368879333165, -1.459595821553321, -0.6255410663799946, -0.6255410663799946,
           0.7875607331187642, 0.7875607331187642, -1.462612790077705, -0.5625433807991174]
    assert np.allclose(y.ravel(), ref, atol=1e-12)
    assert np.allclose(bn.running_mean.data, [0.175, 0.125])
    assert np.allclose(bn.running_var.data, [1.0642857142857143, 1.4642857142857144])


def test_batchnorm_eval_uses_running_stats(rng):
    with precision(np.float64):
        bn = BatchNorm2d(3)
    x = rng.normal(size=(4, 3, 5, 5))
    for _ in range(3):
        bn(x)
    bn.eval()
    y = bn(x)
    ref = (x - bn.running_mean.data[None, :, None, None]) / np.sqrt(bn.running_var.data[None, :, None, None] + 1e-5)
    assert np.allclose(y, ref)


def test_gelu_and_layernorm_frozen_values():
    z = np.array([-3., -1, -0.5, 0, 0.5, 1, 3])
    ref = [-0.0036373920817729943, -0.15880800939172324, -0.15428599017485606, 0.0,
           0.34571400982514394, 0.8411919906082768, 2.996362607918227]
    assert np.allclose(GELU()(z), ref, atol=1e-12)
    with precision(np.float64):
        ln = LayerNorm(4)
    y = ln(np.array([[1., 2, 3, 5], [0, -1, 4, 1]]))
    assert np.allclose(y.ravel(), [-1.1832132521355805, -0.5070913937723917, 0.1690304645907972, 1.5212741813171748,
                                   -0.5345217202229366, -1.0690434404458735, 1.6035651606688104, 0.0], atol=1e-6)


def test_linear_init_modes():
    assert np.array_equal(Linear(3, 3, init="identity").weight.data, np.eye(3, dtype=np.float32))
    assert not Linear(3, 2, init="zeros").weight.data.any()
    with pytest.raises(DimensionError):
        Linear(3, 2, init="identity")
    with pytest.raises(DimensionError):
        Linear(3, 2)(np.zeros((1, 4), dtype=np.float32))


# gradient checks in float64 ------------------------------------------------

GRAD_TOL = 1e-4


def _f64(factory):
    with precision(np.float64):
        return factory()


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("k,s,p,bias", [(3, 1, 1, True), (4, 4, 0, True), (3, 2, 1, False), (1, 1, 0, True)])
def test_conv_gradients(seed, k, s, p, bias):
    rng = np.random.default_rng(seed)
    conv = _f64(lambda: Conv2d(2, 3, k, s, p, bias=bias, rng=rng))
    rep = check_module(conv, rng.normal(size=(2, 2, 8, 8)), seed)
    assert rep.ok(GRAD_TOL), rep


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    bn = _f64(lambda: BatchNorm2d(3))
    bn.gamma.data = rng.normal(size=3) + 1
    bn.beta.data = rng.normal(size=3)
    bn.running_var.data = rng.uniform(0.5, 2, size=3)
    bn.train(training)
    rep = check_module(bn, rng.normal(size=(3, 3, 4, 4)), seed)
    assert rep.ok(GRAD_TOL), rep


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("make", [lambda r: Linear(5, 4, rng=r), lambda r: LayerNorm(5), lambda r: GELU(),
                                  lambda r: Sigmoid(), lambda r: LeakyReLU(0.2), lambda r: ReLU()])
def test_dense_and_activation_gradients(seed, make):
    rng = np.random.default_rng(seed)
    mod = _f64(lambda: make(rng))
    x = rng.normal(size=(3, 2, 5))
    x[np.abs(x) < 1e-3] = 0.5      # keep away from the ReLU kinks
    rep = check_module(mod, x, seed)
    assert rep.ok(GRAD_TOL), rep


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 10_000))
def test_conv_linearity_in_input(k, s, p, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(1, 2, 7, 7))
    w = rng.normal(size=(2, 2, k, k))
    lhs = conv2d(2 * x1 - x2, w, None, s, p)
    rhs = 2 * conv2d(x1, w, None, s, p) - conv2d(x2, w, None, s, p)
    assert np.allclose(lhs, rhs, atol=1e-10)
