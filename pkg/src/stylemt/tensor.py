"""Dense tensors, the layer-module base class, and gradient checking.

Reverse mode works per layer: every module caches what it needs during
``forward`` and consumes that cache in ``backward``, which returns the
gradient with respect to the module input and accumulates parameter
gradients into ``Tensor.grad``. A module's backward may run once per forward.
"""
from __future__ import annotations

import contextlib
import functools
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GraphError, NumericError

_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[0]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = prev


class Tensor:
    """Row-major float array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=True, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NumericError(f"non-finite gradient in {what}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# functional ops


def matmul(a, b):
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return a @ b


def matmul_backward(a, b, dy):
    """Returns (dL/dA, dL/dB) for Y = A @ B."""
    a, b = as_array(a), as_array(b)
    return dy @ b.T, a.T @ dy


def softmax_lastdim(x, temperature=1.0):
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = as_array(x)
    check_finite(x, "softmax input")
    z = (x - x.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, dy, temperature=1.0):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True)) / temperature


# --------------------------------------------------------------------------
# modules


def _arming(fn):
    @functools.wraps(fn)
    def forward(self, *args, **kwargs):
        out = fn(self, *args, **kwargs)
        self._armed = True
        return out
    return forward


def _guarded(fn):
    @functools.wraps(fn)
    def backward(self, *args, **kwargs):
        if not getattr(self, "_armed", False):
            raise GraphError(f"{type(self).__name__}.backward called without a fresh forward")
        self._armed = False
        return fn(self, *args, **kwargs)
    return backward


class Module:
    """Base class for layers with cached-state reverse mode."""

    training = True

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "forward" in cls.__dict__:
            cls.forward = _arming(cls.__dict__["forward"])
        if "backward" in cls.__dict__:
            cls.backward = _guarded(cls.__dict__["backward"])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def named_tensors(self, prefix=""):
        for name, value in vars(self).items():
            if not name.startswith("_") and isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_tensors(f"{prefix}{name}.")

    def named_parameters(self, prefix=""):
        return [(n, t) for n, t in self.named_tensors(prefix) if t.requires_grad]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    @property
    def dtype(self):
        for _, t in self.named_tensors():
            return t.data.dtype
        return np.dtype(default_dtype())


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)

    def ok(self, tol):
        return self.max_rel_err < tol


def grad_check(closure, tensors, eps=1e-6, max_coords=None, rng=None, floor=1e-6):
    """Compare analytic gradients against central differences.

    ``closure()`` must zero nothing itself, run forward and backward, and
    return the scalar loss; analytic gradients are read from ``tensor.grad``.
    ``tensors`` is a dict name -> Tensor (inputs wrapped as tensors are fine).
    Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.zero_grad()
    closure()
    analytic = {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for n, t in tensors.items()}

    report = GradCheckReport(0.0, 0.0, 0)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst_t = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = closure()
            flat[i] = orig - eps
            f_minus = closure()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), floor)
            worst_t = max(worst_t, rel)
            report.max_abs_err = max(report.max_abs_err, abs_err)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = f"{name}[{i}]"
            report.n_checked += 1
        report.per_tensor[name] = worst_t
    for t in tensors.values():
        t.zero_grad()
    return report
