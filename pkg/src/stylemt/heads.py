"""Per-task aggregation, token refinement and classifiers.

Every head reads the shared trunk output (a B x N x C token array, or a
pair of them for the RTMG concat variant) and never writes to it, so heads
can be switched off at inference without touching the other tasks.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, HeadDisabledError
from .layers import GELU, LayerNorm, Linear, ReLU, Sequential, Sigmoid
from .tensor import Module, Tensor, as_array, softmax_backward, softmax_lastdim


def _query(d, rng):
    # zero-mean Gaussian with variance 1/d keeps initial attention near uniform
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=d))


# --------------------------------------------------------------------------
# aggregators: B x N x C tokens -> B x C'


class SpatialTaskAttention(Module):
    """RTM attention: T~ = T W_proj, a = softmax(q T~^T / sqrt(d)), h = (a T~) W_out."""

    def __init__(self, channels, d, rng):
        self.channels, self.d = channels, d
        self.w_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, d)))
        self.query = _query(d, rng)
        self.w_out = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, channels)))
        self.out_dim = channels
        self.alpha = None

    def forward(self, T):
        Tt = T @ self.w_proj.data
        scores = Tt @ self.query.data / math.sqrt(self.d)
        alpha = softmax_lastdim(scores)
        u = np.einsum("bn,bnd->bd", alpha, Tt)
        self.alpha = alpha
        self._cache = (T, Tt, u)
        return u @ self.w_out.data

    def backward(self, dh):
        T, Tt, u = self._cache
        self._cache = None
        alpha = self.alpha
        self.w_out.accumulate(u.T @ dh)
        du = dh @ self.w_out.data.T
        dalpha = np.einsum("bnd,bd->bn", Tt, du)
        dTt = alpha[:, :, None] * du[:, None, :]
        ds = softmax_backward(alpha, dalpha) / math.sqrt(self.d)
        dTt += ds[:, :, None] * self.query.data
        self.query.accumulate(np.einsum("bn,bnd->d", ds, Tt))
        self.w_proj.accumulate(np.einsum("bnc,bnd->cd", T, dTt))
        return dTt @ self.w_proj.data.T


class PatchSpatialAttention(Module):
    """PM attention head: optional squeeze-excitation gate, 1x1 scoring,
    spatial softmax with temperature (or normalised sigmoid), optional
    squared total-variation penalty on the attention map."""

    def __init__(self, channels, grid, rng, tau=1.0, use_se=False, spatial_softmax=True,
                 tv_lambda=0.0, se_reduction=4):
        if tau <= 0:
            raise ConfigError(f"attn_tau must be positive, got {tau}")
        self.channels, self.grid = channels, tuple(grid)
        self.tau, self.use_se, self.spatial_softmax, self.tv_lambda = tau, use_se, spatial_softmax, tv_lambda
        if use_se:
            hidden = max(1, channels // se_reduction)
            self.se = Sequential(Linear(channels, hidden, rng=rng), ReLU(),
                                 Linear(hidden, channels, rng=rng, init="xavier"), Sigmoid())
        else:
            self.se = None
        self.w_score = Tensor(rng.normal(0.0, 1.0 / math.sqrt(channels), size=channels))
        self.b_score = Tensor(np.zeros(1))
        self.out_dim = channels
        self.alpha = None
        self.penalty = 0.0

    def forward(self, T):
        if self.se is not None:
            gate = self.se(T.mean(axis=1))
            Tg = T * gate[:, None, :]
        else:
            gate, Tg = None, T
        a = (Tg @ self.w_score.data + self.b_score.data) / self.tau
        if self.spatial_softmax:
            alpha, g = softmax_lastdim(a), None
        else:
            g = 1.0 / (1.0 + np.exp(-a))
            alpha = g / g.sum(axis=1, keepdims=True)
        self.alpha = alpha
        self.penalty = self._tv(alpha) * self.tv_lambda if self.tv_lambda else 0.0
        self._cache = (T, Tg, gate, g)
        return np.einsum("bn,bnc->bc", alpha, Tg)

    def _tv(self, alpha):
        A = alpha.reshape(alpha.shape[0], *self.grid)
        return float(((np.diff(A, axis=1) ** 2).sum() + (np.diff(A, axis=2) ** 2).sum()) / alpha.shape[0])

    def _tv_grad(self, alpha):
        A = alpha.reshape(alpha.shape[0], *self.grid)
        g = np.zeros_like(A)
        dv, dh = np.diff(A, axis=1), np.diff(A, axis=2)
        g[:, 1:, :] += 2 * dv
        g[:, :-1, :] -= 2 * dv
        g[:, :, 1:] += 2 * dh
        g[:, :, :-1] -= 2 * dh
        return (g / alpha.shape[0]).reshape(alpha.shape)

    def backward(self, dh):
        T, Tg, gate, g = self._cache
        self._cache = None
        alpha = self.alpha
        dalpha = np.einsum("bnc,bc->bn", Tg, dh)
        if self.tv_lambda:
            dalpha = dalpha + self.tv_lambda * self._tv_grad(alpha)
        dTg = alpha[:, :, None] * dh[:, None, :]
        if self.spatial_softmax:
            da = softmax_backward(alpha, dalpha)
        else:
            s = g.sum(axis=1, keepdims=True)
            dg = (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True)) / s
            da = dg * g * (1 - g)
        da = da / self.tau
        self.b_score.accumulate(np.array([da.sum()]))
        self.w_score.accumulate(np.einsum("bn,bnc->c", da, Tg))
        dTg += da[:, :, None] * self.w_score.data
        if self.se is None:
            return dTg
        dgate = np.einsum("bnc,bnc->bc", dTg, T)
        dm = self.se.backward(dgate)
        return dTg * gate[:, None, :] + dm[:, None, :] / T.shape[1]


class ConditionedPool(Module):
    """PMG pooling: a_i = softmax_i <q, t_i> (unscaled), z = sum_i a_i t_i."""

    def __init__(self, d_model, rng):
        self.query = _query(d_model, rng)
        self.out_dim = d_model
        self.alpha = None

    def forward(self, T):
        alpha = softmax_lastdim(T @ self.query.data)
        self.alpha = alpha
        self._T = T
        return np.einsum("bn,bnd->bd", alpha, T)

    def backward(self, dz):
        T, alpha = self._T, self.alpha
        self._T = None
        dalpha = np.einsum("bnd,bd->bn", T, dz)
        ds = softmax_backward(alpha, dalpha)
        self.query.accumulate(np.einsum("bn,bnd->d", ds, T))
        return alpha[:, :, None] * dz[:, None, :] + ds[:, :, None] * self.query.data


class GapPool(Module):
    """Uniform mean over tokens (the no-attention ablation)."""

    def __init__(self, channels):
        self.out_dim = channels
        self.alpha = None

    def forward(self, T):
        self._shape = T.shape
        return T.mean(axis=1)

    def backward(self, dh):
        b, n, c = self._shape
        return np.broadcast_to(dh[:, None, :] / n, (b, n, c)).copy()


class DualAggregator(Module):
    """RTMG concat variant: attention over spatial tokens and over Gram rows."""

    def __init__(self, spatial, gram):
        self.spatial, self.gram = spatial, gram
        self.out_dim = spatial.out_dim + gram.out_dim

    @property
    def alpha(self):
        return self.gram.alpha

    def forward(self, feats):
        T, G = feats
        return np.concatenate([self.spatial(T), self.gram(G)], axis=1)

    def backward(self, dh):
        k = self.spatial.out_dim
        return self.spatial.backward(dh[:, :k]), self.gram.backward(dh[:, k:])


# --------------------------------------------------------------------------
# token refiner


class SelfAttention(Module):
    def __init__(self, d_model, heads, rng):
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} not divisible by {heads} heads")
        self.d_model, self.heads = d_model, heads
        self.wq = Linear(d_model, d_model, rng=rng, init="xavier")
        self.wk = Linear(d_model, d_model, rng=rng, init="xavier")
        self.wv = Linear(d_model, d_model, rng=rng, init="xavier")
        self.wo = Linear(d_model, d_model, rng=rng, init="xavier")

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def forward(self, x):
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        scale = 1.0 / math.sqrt(q.shape[-1])
        A = softmax_lastdim(q @ k.transpose(0, 1, 3, 2) * scale)
        self._cache = (q, k, v, A, scale)
        return self.wo(self._merge(A @ v))

    def backward(self, dy):
        q, k, v, A, scale = self._cache
        self._cache = None
        dO = self._split(self.wo.backward(dy))
        dA = dO @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dO
        dS = softmax_backward(A, dA) * scale
        dq = dS @ k
        dk = dS.transpose(0, 1, 3, 2) @ q
        return (self.wq.backward(self._merge(dq)) + self.wk.backward(self._merge(dk))
                + self.wv.backward(self._merge(dv)))


class RefinerLayer(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model, heads, ff_dim, rng):
        self.ln1 = LayerNorm(d_model)
        self.attn = SelfAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff = Sequential(Linear(d_model, ff_dim, rng=rng), GELU(), Linear(ff_dim, d_model, rng=rng, init="xavier"))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))

    def backward(self, dy):
        dy = dy + self.ln2.backward(self.ff.backward(dy))
        return dy + self.ln1.backward(self.attn.backward(dy))


class TokenRefiner(Module):
    """Stack of self-attention blocks over the N_p style tokens.

    No positional encoding unless ``positional`` (learned, one vector per
    token); without it the refiner is permutation-equivariant.
    """

    def __init__(self, d_model, layers=1, heads=4, ff_dim=None, n_tokens=None, positional=False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if layers and d_model % heads:
            raise ConfigError(f"d_model={d_model} not divisible by {heads} heads")
        self.d_model, self.n_layers, self.heads = d_model, layers, heads
        ff_dim = ff_dim or 2 * d_model
        self.layers = [RefinerLayer(d_model, heads, ff_dim, rng) for _ in range(layers)]
        if positional:
            if n_tokens is None:
                raise ConfigError("positional embedding needs n_tokens")
            self.pos = Tensor(rng.normal(0.0, 0.02, size=(n_tokens, d_model)))
        else:
            self.pos = None

    def forward(self, x):
        if self.pos is not None:
            x = x + self.pos.data
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        if self.pos is not None:
            self.pos.accumulate(dy.sum(axis=0))
        return dy


def refine_tokens(tokens, refiner):
    return refiner(as_array(tokens))


# --------------------------------------------------------------------------
# classifiers and heads


class Classifier(Module):
    """Linear head, optionally preceded by ``num_layers`` hidden ReLU layers."""

    def __init__(self, d_in, n_classes, rng, hidden_dims=0, num_layers=0):
        layers, d = [], d_in
        for _ in range(num_layers):
            layers += [Linear(d, hidden_dims, rng=rng), ReLU()]
            d = hidden_dims
        layers.append(Linear(d, n_classes, rng=rng, init="xavier"))
        self.net = Sequential(*layers)
        self.n_classes = n_classes

    @property
    def output(self):
        return self.net.layers[-1]

    def forward(self, z):
        return self.net(z)

    def backward(self, dy):
        return self.net.backward(dy)


class TaskHead(Module):
    """Aggregator + classifier for one task; may be disabled at inference."""

    def __init__(self, task, variant, aggregator, classifier):
        self.task, self.variant = task, variant
        self.aggregator = aggregator
        self.classifier = classifier
        self.enabled = True

    @property
    def penalty(self):
        return getattr(self.aggregator, "penalty", 0.0)

    def attention_weights(self):
        return self.aggregator.alpha

    def forward(self, feats):
        if not self.enabled:
            raise HeadDisabledError(f"head {self.task!r} is disabled")
        return self.classifier(self.aggregator(feats))

    def backward(self, dlogits):
        return self.aggregator.backward(self.classifier.backward(dlogits))


# functional forms of the single-step operations -----------------------------


def spatial_task_attention(T, head):
    agg = head.aggregator if isinstance(head, TaskHead) else head
    if not isinstance(agg, SpatialTaskAttention):
        raise ConfigError("spatial_task_attention needs a spatial_attention head")
    return agg(as_array(T))


def gap_head(F, head):
    """GAP over a B x C x H x W map followed by the head's classifier."""
    if head.variant != "gap":
        raise ConfigError("gap_head needs a gap head")
    F = as_array(F)
    return head(F.reshape(F.shape[0], F.shape[1], -1).transpose(0, 2, 1))


def task_conditioned_pool(T, query):
    """z = sum_i softmax_i(<q, t_i>) t_i for T of shape N x d or B x N x d."""
    T, q = as_array(T), as_array(query)
    squeeze = T.ndim == 2
    if squeeze:
        T = T[None]
    alpha = softmax_lastdim(T @ q)
    z = np.einsum("bn,bnd->bd", alpha, T)
    return (z[0], alpha[0]) if squeeze else (z, alpha)


def classify(z, head):
    if not head.enabled:
        raise HeadDisabledError(f"head {head.task!r} is disabled")
    return head.classifier(as_array(z))


def classifier_param_count(d, n_classes):
    return d * n_classes + n_classes
