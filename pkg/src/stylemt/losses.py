"""Weighted cross-entropy, focal loss and per-class weight computation.

Label -1 is the ignore sentinel: ignored rows contribute neither to the
loss value nor to its gradient, and the mean runs over kept rows only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

WEIGHT_MODES = ("hard", "soft", "focal", "median")


def _check_labels(labels, k):
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < -1) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(labels[i])} at batch row {i} outside -1..{k - 1}")
    return labels


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _prepare(logits, labels, weights):
    logits = np.asarray(logits)
    b, k = logits.shape
    labels = _check_labels(labels, k)
    keep = np.flatnonzero(labels >= 0)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    return logits, labels, keep, w


def weighted_ce(logits, labels, weights=None):
    """Mean over kept rows of -w_y log softmax(logits)_y. Returns (loss, dlogits)."""
    logits, labels, keep, w = _prepare(logits, labels, weights)
    grad = np.zeros_like(logits)
    if keep.size == 0:
        return 0.0, grad
    y = labels[keep]
    logp = _log_softmax(logits[keep].astype(np.float64))
    rows = np.arange(keep.size)
    wy = w[y]
    n = keep.size
    loss = float(np.sum(-wy * logp[rows, y]) / n)
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    grad[keep] = (wy[:, None] * dz / n).astype(logits.dtype)
    return loss, grad


def focal_loss(logits, labels, weights=None, gamma=2.0):
    """Mean over kept rows of -w_y (1 - p_y)^gamma log p_y. Returns (loss, dlogits)."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    logits, labels, keep, w = _prepare(logits, labels, weights)
    grad = np.zeros_like(logits)
    if keep.size == 0:
        return 0.0, grad
    y = labels[keep]
    logp = _log_softmax(logits[keep].astype(np.float64))
    p = np.exp(logp)
    rows = np.arange(keep.size)
    logp_y, p_y = logp[rows, y], p[rows, y]
    wy = w[y]
    n = keep.size
    q = 1.0 - p_y
    mod = q ** gamma
    loss = float(np.sum(-wy * mod * logp_y) / n)
    # dL/dp_y, then dp_y/dz = p_y (onehot - p)
    if gamma == 0:
        dldpy = -1.0 / p_y
    else:
        qs = np.where(q > 0, q, 1.0)
        dldpy = np.where(q > 0, gamma * qs ** (gamma - 1) * logp_y, 0.0) - mod / p_y
    onehot = np.zeros_like(p)
    onehot[rows, y] = 1.0
    dz = (wy * dldpy * p_y)[:, None] * (onehot - p) / n
    grad[keep] = dz.astype(logits.dtype)
    return loss, grad


@dataclass
class ClassWeights:
    weights: np.ndarray
    mode: str
    cap: float

    def to_list(self):
        return [float(v) for v in self.weights]


def raw_class_weights(counts, mode):
    """Pre-clip weights; zero-count classes are returned as NaN."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 0):
        raise DataError(f"invalid class counts {counts.tolist()}")
    pos = counts > 0
    if not pos.any():
        raise DataError("all class counts are zero")
    n, k = counts.sum(), counts.size
    w = np.full(k, np.nan)
    c = counts[pos]
    if mode == "median":
        w[pos] = np.median(c) / c
    elif mode == "hard":
        w[pos] = n / (k * c)
    elif mode == "soft":
        w[pos] = np.sqrt(n / (k * c))
    elif mode == "focal":
        inv = 1.0 / c
        w[pos] = inv / inv.mean()
    else:
        raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")
    return w


def compute_class_weights(counts, mode="median", cap=10.0):
    """Raw weights, zero-count classes set to cap, clipped to [1/cap, cap], mean-1."""
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    w = raw_class_weights(counts, mode)
    w = np.where(np.isnan(w), cap, w)
    w = np.clip(w, 1.0 / cap, cap)
    return ClassWeights(w / w.mean(), mode, float(cap))


def label_counts(labels, k):
    labels = np.asarray(labels)
    return np.bincount(labels[labels >= 0], minlength=k)[:k]
