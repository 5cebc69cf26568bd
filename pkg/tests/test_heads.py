import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradutil import check_module
from stylemt.errors import ConfigError, HeadDisabledError
from stylemt.heads import (Classifier, ConditionedPool, DualAggregator, GapPool, PatchSpatialAttention,
                           RefinerLayer, SpatialTaskAttention, TaskHead, TokenRefiner, classifier_param_count,
                           classify, gap_head, refine_tokens, spatial_task_attention, task_conditioned_pool)
from stylemt.tensor import Module, precision


def f64(factory):
    with precision(np.float64):
        return factory()


# RTM spatial attention -----------------------------------------------------

def test_spatial_attention_identical_tokens_uniform(rng):
    att = f64(lambda: SpatialTaskAttention(5, 3, rng))
    tok = rng.normal(size=5)
    T = np.tile(tok, (1, 7, 1))
    h = spatial_task_attention(T, att)
    assert np.allclose(att.alpha, 1 / 7)
    assert np.allclose(h[0], tok @ att.w_proj.data @ att.w_out.data)


def test_spatial_attention_saturation_one_hot(rng):
    att = f64(lambda: SpatialTaskAttention(4, 4, rng))
    T = rng.normal(size=(1, 6, 4)) * 0.1
    # push token 2's score far up along the query direction
    direction = np.linalg.lstsq(att.w_proj.data.T, att.query.data, rcond=None)[0]
    T[0, 2] += 1e4 * direction / np.linalg.norm(att.query.data) ** 2
    h = att(T)
    assert att.alpha[0, 2] > 1 - 1e-9
    assert np.allclose(h[0], T[0, 2] @ att.w_proj.data @ att.w_out.data)


def test_spatial_attention_direct_summation_oracle(rng):
    att = f64(lambda: SpatialTaskAttention(6, 4, rng))
    T = rng.normal(size=(2, 5, 6))
    h = att(T)
    for b in range(2):
        Tt = T[b] @ att.w_proj.data
        s = np.array([Tt[i] @ att.query.data / math.sqrt(4) for i in range(5)])
        a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        ref = sum(a[i] * Tt[i] for i in range(5)) @ att.w_out.data
        assert np.max(np.abs(h[b] - ref)) < 1e-6


# GAP ------------------------------------------------------------------------

def test_gap_head_constant_map_and_reduction(rng):
    clf = f64(lambda: Classifier(3, 2, rng))
    head = TaskHead("t", "gap", GapPool(3), clf)
    F = np.ones((1, 3, 4, 4)) * np.array([1.0, -2.0, 0.5])[None, :, None, None]
    assert np.allclose(GapPool(3)(F.reshape(1, 3, 16).transpose(0, 2, 1)), [[1.0, -2.0, 0.5]])
    assert np.allclose(gap_head(F, head), clf(np.array([[1.0, -2.0, 0.5]])))
    att = f64(lambda: SpatialTaskAttention(3, 3, rng))
    att.w_proj.data[...] = np.eye(3)
    att.w_out.data[...] = np.eye(3)
    att.query.data[...] = 0
    T = rng.normal(size=(2, 9, 3))
    assert np.allclose(att(T), GapPool(3)(T), atol=1e-12)
    with pytest.raises(ConfigError):
        gap_head(F, TaskHead("t", "conditioned_pool", ConditionedPool(3, rng), clf))


# refiner --------------------------------------------------------------------

def test_refiner_zero_layers_is_identity(rng):
    T = rng.normal(size=(2, 4, 8))
    assert np.array_equal(refine_tokens(T, TokenRefiner(8, layers=0)), T)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_refiner_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    ref = f64(lambda: TokenRefiner(8, layers=2, heads=2, rng=rng))
    T = rng.normal(size=(1, 6, 8))
    perm = rng.permutation(6)
    assert np.allclose(ref(T)[:, perm], ref(T[:, perm]), atol=1e-10)


def _ln(x):
    return (x - x.mean()) / math.sqrt(x.var() + 1e-5)


def test_refiner_single_layer_hand_oracle():
    rng = np.random.default_rng(3)
    layer = f64(lambda: RefinerLayer(4, 1, 8, rng))
    for lin in (layer.attn.wq, layer.attn.wk, layer.attn.wv, layer.attn.wo):
        lin.bias.data[...] = rng.normal(size=4) * 0.1
    X = np.array([[1.0, -0.5, 0.25, 2.0], [0.0, 1.5, -1.0, 0.5]])
    out = layer(X[None])[0]

    a = layer.attn
    n = [_ln(x) for x in X]
    q = [v @ a.wq.weight.data + a.wq.bias.data for v in n]
    k = [v @ a.wk.weight.data + a.wk.bias.data for v in n]
    v = [u @ a.wv.weight.data + a.wv.bias.data for u in n]
    ref = []
    for i in range(2):
        s = [q[i] @ k[j] / 2.0 for j in range(2)]
        e = [math.exp(x - max(s)) for x in s]
        w = [x / sum(e) for x in e]
        o = (w[0] * v[0] + w[1] * v[1]) @ a.wo.weight.data + a.wo.bias.data
        x1 = X[i] + o
        l1, l2 = layer.ff.layers[0], layer.ff.layers[2]
        hdn = _ln(x1) @ l1.weight.data + l1.bias.data
        gelu = 0.5 * hdn * (1 + np.tanh(math.sqrt(2 / math.pi) * (hdn + 0.044715 * hdn ** 3)))
        ref.append(x1 + gelu @ l2.weight.data + l2.bias.data)
    assert np.allclose(out, np.array(ref), atol=1e-12)


def test_refiner_head_divisibility():
    with pytest.raises(ConfigError):
        TokenRefiner(10, layers=1, heads=4)


# conditioned pooling ----------------------------------------------------------

def test_conditioned_pool_examples(rng):
    tok = rng.normal(size=6)
    z, a = task_conditioned_pool(np.tile(tok, (5, 1)), rng.normal(size=6))
    assert np.allclose(z, tok)
    T = rng.normal(size=(5, 6))
    z, a = task_conditioned_pool(T, np.zeros(6))
    assert np.allclose(a, 0.2) and np.allclose(z, T.mean(axis=0))
    q = rng.normal(size=6)
    z, a = task_conditioned_pool(T, q)
    s = np.array([np.dot(q, t) for t in T])     # unscaled inner product
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    assert np.allclose(z, (w[:, None] * T).sum(axis=0), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 20))
def test_conditioned_pool_convex_hull(seed, scale):
    rng = np.random.default_rng(seed)
    pool = f64(lambda: ConditionedPool(4, rng))
    pool.query.data *= scale
    T = rng.normal(size=(3, 7, 4)) * scale
    z = pool(T)
    assert np.allclose(pool.alpha.sum(axis=1), 1, atol=1e-6)
    assert np.all(z >= T.min(axis=1) - 1e-9) and np.all(z <= T.max(axis=1) + 1e-9)


# patch spatial attention (PM) --------------------------------------------------

def test_patch_attention_weights_are_distributions(rng):
    for soft in (True, False):
        att = f64(lambda: PatchSpatialAttention(4, (3, 3), rng, tau=0.5, use_se=True, spatial_softmax=soft))
        att(rng.normal(size=(2, 9, 4)))
        assert np.all(att.alpha >= 0) and np.allclose(att.alpha.sum(axis=1), 1)
    with pytest.raises(ConfigError):
        PatchSpatialAttention(4, (3, 3), rng, tau=0)


def test_tv_penalty_zero_for_uniform_map(rng):
    att = f64(lambda: PatchSpatialAttention(4, (3, 3), rng, tv_lambda=1.0))
    att.w_score.data[...] = 0
    att(rng.normal(size=(1, 9, 4)))
    assert att.penalty == 0.0


# classifier and heads ------------------------------------------------------------

def test_classifier_param_count_and_zero_weights(rng):
    assert classifier_param_count(128, 4) == 516
    assert 400 <= 516 <= 1300       # per-classifier band reported for PMG
    assert Classifier(128, 4, rng).num_parameters() == 516
    clf = Classifier(8, 3, rng)
    clf.output.weight.data[...] = 0
    clf.output.bias.data[...] = [1.0, -1.0, 2.0]
    assert np.allclose(clf(rng.normal(size=(2, 8)).astype(np.float32)), [[1, -1, 2]] * 2)
    logits = rng.normal(size=(4, 3))
    assert np.array_equal(np.argmax(logits, 1), np.argmax(logits + 5.0, 1))


def test_disabled_head_raises(rng):
    head = TaskHead("t", "conditioned_pool", ConditionedPool(4, rng), Classifier(4, 2, rng))
    head.enabled = False
    with pytest.raises(HeadDisabledError):
        head(np.zeros((1, 3, 4), dtype=np.float32))
    with pytest.raises(HeadDisabledError):
        classify(np.zeros((1, 4), dtype=np.float32), head)


# gradient checks ----------------------------------------------------------------

class _Pair(Module):
    """Unpacks positional inputs into the tuple the dual aggregator expects."""

    def __init__(self, agg):
        self.agg = agg

    def forward(self, T, G):
        return self.agg((T, G))

    def backward(self, dh):
        return self.agg.backward(dh)


def _grad_cases(rng):
    return [
        (SpatialTaskAttention(5, 3, rng), rng.normal(size=(2, 4, 5))),
        (ConditionedPool(4, rng), rng.normal(size=(2, 5, 4))),
        (GapPool(3), rng.normal(size=(2, 5, 3))),
        (PatchSpatialAttention(4, (2, 3), rng), rng.normal(size=(2, 6, 4))),
        (PatchSpatialAttention(4, (2, 3), rng, tau=0.5, use_se=True, spatial_softmax=False, tv_lambda=0.3),
         rng.normal(size=(2, 6, 4))),
        (TokenRefiner(4, layers=2, heads=2, rng=rng), rng.normal(size=(2, 3, 4))),
        (TokenRefiner(4, layers=1, heads=1, n_tokens=3, positional=True, rng=rng), rng.normal(size=(2, 3, 4))),
        (Classifier(4, 3, rng, hidden_dims=5, num_layers=1), rng.normal(size=(3, 4)) + 0.1),
        (_Pair(DualAggregator(SpatialTaskAttention(3, 2, rng), SpatialTaskAttention(4, 2, rng))),
         (rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 4, 4)))),
    ]


@pytest.mark.parametrize("seed", range(3))
def test_head_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        cases = _grad_cases(rng)
    for mod, x in cases:
        rep = check_module(mod, x, seed)
        assert rep.ok(1e-4), (type(mod).__name__, rep)
