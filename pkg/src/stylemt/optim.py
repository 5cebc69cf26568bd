"""SGD with momentum, AdamW, and the cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError


def cosine_lr(t, total, lr0):
    """lr0 * (1 + cos(pi t / T)) / 2."""
    if total <= 0:
        raise ConfigError("cosine schedule needs a positive horizon T")
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside 0..{total}")
    return lr0 * (1.0 + math.cos(math.pi * t / total)) / 2.0


def _check_grads(params):
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {i} (shape {p.shape}); step aborted")


class SGD:
    """v <- mu v + g (+ wd p); p <- p - lr v."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params, self.lr, self.momentum, self.weight_decay = list(params), lr, momentum, weight_decay
        self.state = [None] * len(self.params)

    def step(self):
        _check_grads(self.params)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = g if self.state[i] is None else self.momentum * self.state[i] + g
            self.state[i] = v
            p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class AdamW:
    """Adam with decoupled weight decay: p <- p - lr wd p - lr m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.weight_decay = list(params), lr, weight_decay
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self):
        _check_grads(self.params)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, p in enumerate(self.params):
            upd = self.lr * self.weight_decay * p.data.astype(np.float64)
            if p.grad is not None:
                g = p.grad.astype(np.float64)
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                upd = upd + self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(name, params, lr, momentum=0.9, weight_decay=0.0):
    if name == "sgd_momentum":
        return SGD(params, lr, momentum, weight_decay)
    if name == "adamw":
        return AdamW(params, lr, weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
