"""Generic layers: linear, conv2d, batchnorm, layernorm, activations."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Module, Tensor, default_dtype


def _init_rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, k, stride, padding):
    b, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} with padding {padding} does not fit a {h}x{w} input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of B x C x H x W input with O x C x k x k weights."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-d input, got shape {x.shape}")
    o, c, k, k2 = weight.shape
    if x.shape[1] != c:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels, weights expect {c}")
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = cols @ weight.reshape(o, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_backward(x_shape, cols, weight, dout, stride, padding):
    """Returns (dx, dW, db) given the im2col matrix cached at forward time."""
    b, c, h, w = x_shape
    o, _, k, _ = weight.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dflat.T @ cols).reshape(weight.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ weight.reshape(o, -1)).reshape(b, ho, wo, c, k, k)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp, dw, db


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=True, rng=None):
        rng = _init_rng(rng)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        # He (fan-in) initialization
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"Conv2d expects B x {self.in_channels} x H x W, got {x.shape}")
        cols, ho, wo = _im2col(x, self.kernel, self.stride, self.padding)
        w = self.weight.data
        out = cols @ w.reshape(self.out_channels, -1).T
        if self.bias is not None:
            out += self.bias.data
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2))

    def backward(self, dout):
        x_shape, cols = self._cache
        self._cache = None
        dx, dw, db = conv2d_backward(x_shape, cols, self.weight.data, dout, self.stride, self.padding)
        self.weight.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dx


# --------------------------------------------------------------------------
# normalization


class BatchNorm2d(Module):
    """Batch normalization over (B, H, W) per channel.

    Running variance is updated with the unbiased batch variance, the
    normalization itself uses the biased one.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels), requires_grad=False)
        self.running_var = Tensor(np.ones(channels), requires_grad=False)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"BatchNorm2d expects {self.channels} channels, got {x.shape}")
        g = self.gamma.data.reshape(1, -1, 1, 1)
        b = self.beta.data.reshape(1, -1, 1, 1)
        if self.training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            m = self.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mean).astype(x.dtype)
            self.running_var.data = ((1 - m) * self.running_var.data + m * unbiased).astype(x.dtype)
            self._cache = ("train", xhat, inv_std)
            return g * xhat + b
        inv_std = 1.0 / np.sqrt(self.running_var.data + self.eps)
        xhat = (x - self.running_mean.data.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = ("eval", xhat, inv_std)
        return g * xhat + b

    def backward(self, dy):
        mode, xhat, inv_std = self._cache
        self._cache = None
        self.gamma.accumulate((dy * xhat).sum(axis=(0, 2, 3)))
        self.beta.accumulate(dy.sum(axis=(0, 2, 3)))
        dxhat = dy * self.gamma.data.reshape(1, -1, 1, 1)
        inv = inv_std.reshape(1, -1, 1, 1)
        if mode == "eval":
            return dxhat * inv
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv * (dxhat - s1 / n - xhat * s2 / n)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.dim, self.eps = dim, eps
        self.gamma = Tensor(np.ones(dim))
        self.beta = Tensor(np.zeros(dim))

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"LayerNorm expects last dim {self.dim}, got {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.gamma.data + self.beta.data

    def backward(self, dy):
        xhat, inv_std = self._cache
        self._cache = None
        lead = tuple(range(dy.ndim - 1))
        self.gamma.accumulate((dy * xhat).sum(axis=lead))
        self.beta.accumulate(dy.sum(axis=lead))
        dxhat = dy * self.gamma.data
        return inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# dense


class Linear(Module):
    """y = x @ W + b over the last axis; W is stored as in_features x out_features."""

    def __init__(self, in_features, out_features, bias=True, rng=None, init="he"):
        rng = _init_rng(rng)
        self.in_features, self.out_features = in_features, out_features
        if init == "identity":
            if in_features != out_features:
                raise DimensionError("identity init needs a square weight")
            w = np.eye(in_features)
        elif init == "zeros":
            w = np.zeros((in_features, out_features))
        else:
            scale = math.sqrt(2.0 / in_features) if init == "he" else math.sqrt(1.0 / in_features)
            w = rng.normal(0.0, scale, size=(in_features, out_features))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        y = x @ self.weight.data
        if self.bias is not None:
            y = y + self.bias.data
        self._x = x
        return y

    def backward(self, dy):
        x = self._x
        self._x = None
        x2 = x.reshape(-1, self.in_features)
        d2 = dy.reshape(-1, self.out_features)
        self.weight.accumulate(x2.T @ d2)
        if self.bias is not None:
            self.bias.accumulate(d2.sum(axis=0))
        return dy @ self.weight.data.T


# --------------------------------------------------------------------------
# activations


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        self._scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * self._scale

    def backward(self, dy):
        return dy * self._scale


class GELU(Module):
    """tanh approximation."""

    _c = math.sqrt(2.0 / math.pi)

    def forward(self, x):
        u = self._c * (x + 0.044715 * x ** 3)
        t = np.tanh(u)
        self._cache = (x, t)
        return 0.5 * x * (1 + t)

    def backward(self, dy):
        x, t = self._cache
        du = self._c * (1 + 3 * 0.044715 * x ** 2)
        return dy * (0.5 * (1 + t) + 0.5 * x * (1 - t ** 2) * du)


class Sigmoid(Module):
    def forward(self, x):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1 - self._y)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def zeros(shape):
    return np.zeros(shape, dtype=default_dtype())
