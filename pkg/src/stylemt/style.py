"""Gram-matrix style descriptors: global Gram, channel projection, patch
partition, local Grams and style-token projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Conv2d, Linear
from .tensor import Module, as_array


def gram_global(F):
    """G = X X^T / S per batch element, X the B x C x S flattening of F."""
    F = as_array(F)
    if F.ndim != 4:
        raise DimensionError(f"gram_global expects B x C x H x W, got {F.shape}")
    b, c, h, w = F.shape
    X = F.reshape(b, c, h * w)
    return X @ X.transpose(0, 2, 1) / (h * w)


def gram_backward(X, dG, n):
    """dL/dX for G = X X^T / n over the last two axes."""
    return (dG + np.swapaxes(dG, -1, -2)) @ X / n


def partition_patches(F, d):
    """Split B x C x H x W into d*d row-major tiles -> B x d^2 x C x A."""
    F = as_array(F)
    b, c, h, w = F.shape
    if d < 1 or h % d or w % d:
        raise ConfigError(f"patch_div={d} does not divide the {h}x{w} feature map")
    ph, pw = h // d, w // d
    tiles = F.reshape(b, c, d, ph, d, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(tiles.reshape(b, d * d, c, ph * pw))


def merge_patches(P, d, h, w):
    """Inverse of :func:`partition_patches`."""
    b, n, c, a = P.shape
    ph, pw = h // d, w // d
    return np.ascontiguousarray(
        P.reshape(b, d, d, c, ph, pw).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, h, w))


def gram_local(patches):
    """G_i = X_i X_i^T / A for every patch; input B x N x C x A."""
    P = as_array(patches)
    if P.ndim != 4:
        raise DimensionError(f"gram_local expects B x N x C x A patches, got {P.shape}")
    return P @ P.transpose(0, 1, 3, 2) / P.shape[-1]


def vec(G):
    """Row-major vectorisation of the trailing C x C axes."""
    return G.reshape(*G.shape[:-2], G.shape[-2] * G.shape[-1])


@dataclass
class StyleTokenSet:
    tokens: np.ndarray      # B x N_p x d_model
    patch_div: int
    rows: int               # patch height in map pixels
    cols: int
    area: int


def tokenize(grams, projection, patch_div, rows, cols):
    """Project vec(G_i) with a shared linear map."""
    grams = as_array(grams)
    n = grams.shape[1]
    if n != patch_div * patch_div:
        raise DimensionError(f"{n} Grams for patch_div={patch_div}")
    return StyleTokenSet(projection(vec(grams)), patch_div, rows, cols, rows * cols)


# --------------------------------------------------------------------------
# modules


class ChannelProjection(Module):
    """Learned 1x1 convolution C -> C_r."""

    def __init__(self, cin, cout, rng=None, identity=False):
        if cout < 1:
            raise ConfigError(f"projection width must be >= 1, got {cout}")
        self.conv = Conv2d(cin, cout, 1, 1, 0, rng=rng)
        if identity:
            if cin != cout:
                raise ConfigError("identity init needs cin == cout")
            self.conv.weight.data[...] = np.eye(cin).reshape(cin, cin, 1, 1)

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, F):
        return self.conv(F)

    def backward(self, dy):
        return self.conv.backward(dy)


def project_channels(F, projection):
    return projection(as_array(F))


class GlobalGram(Module):
    def forward(self, F):
        b, c, h, w = F.shape
        self._X = F.reshape(b, c, h * w)
        self._shape = F.shape
        return self._X @ self._X.transpose(0, 2, 1) / (h * w)

    def backward(self, dG):
        X, shape = self._X, self._shape
        self._X = None
        return gram_backward(X, dG, X.shape[-1]).reshape(shape)


class LocalGramTokens(Module):
    """Partition into d*d patches, local Gram per patch, vectorise.

    Output is B x d^2 x C_r^2 (pre-projection tokens).
    """

    def __init__(self, patch_div):
        self.patch_div = patch_div

    def forward(self, F):
        b, c, h, w = F.shape
        P = partition_patches(F, self.patch_div)
        self._cache = (P, (h, w))
        return vec(gram_local(P))

    def backward(self, dt):
        P, (h, w) = self._cache
        self._cache = None
        b, n, c, a = P.shape
        dG = dt.reshape(b, n, c, c)
        return merge_patches(gram_backward(P, dG, a), self.patch_div, h, w)


class TokenProjection(Module):
    """Shared linear map C_r^2 -> d_model applied to every token."""

    def __init__(self, gram_channels, d_model, rng=None):
        if d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {d_model}")
        self.linear = Linear(gram_channels * gram_channels, d_model, rng=rng, init="xavier")

    def forward(self, t):
        return self.linear(t)

    def backward(self, dy):
        return self.linear.backward(dy)
