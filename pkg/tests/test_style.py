import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradutil import check_module
from stylemt.errors import ConfigError
from stylemt.layers import Linear
from stylemt.style import (ChannelProjection, GlobalGram, LocalGramTokens, TokenProjection, gram_global, gram_local,
                           merge_patches, partition_patches, project_channels, tokenize, vec)
from stylemt.tensor import precision


def naive_gram(F):
    c, h, w = F.shape
    G = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            for r in range(h):
                for s in range(w):
                    G[i, j] += F[i, r, s] * F[j, r, s]
    return G / (h * w)


maps = arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 4), st.sampled_from([2, 4]),
                                    st.sampled_from([2, 4])), elements=st.floats(-10, 10))


def test_gram_examples():
    assert np.allclose(gram_global(np.eye(2).reshape(1, 2, 1, 2))[0], 0.5 * np.eye(2))
    F = np.ones((1, 2, 3, 3)) * np.array([2.0, -3.0])[None, :, None, None]
    assert np.allclose(gram_global(F)[0], [[4, -6], [-6, 9]])
    F = np.random.default_rng(0).normal(size=(1, 3, 5, 5))
    assert np.max(np.abs(gram_global(F)[0] - naive_gram(F[0]))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(maps)
def test_grams_symmetric_and_psd(F):
    for G in (gram_global(F), gram_local(partition_patches(F, 2))):
        assert np.max(np.abs(G - np.swapaxes(G, -1, -2))) < 1e-6
        sym = (G + np.swapaxes(G, -1, -2)) / 2
        assert np.linalg.eigvalsh(sym).min() >= -1e-5 * max(1.0, np.abs(G).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_global_gram_invariant_to_spatial_permutation(seed, c):
    rng = np.random.default_rng(seed)
    # dyadic values keep every product and sum exact, so invariance is bit-exact
    F = rng.integers(-16, 17, size=(1, c, 4, 4)) / 4.0
    perm = rng.permutation(16)
    Fp = F.reshape(1, c, 16)[:, :, perm].reshape(F.shape)
    assert np.array_equal(gram_global(F), gram_global(Fp))


def test_projection_identity_and_widths(rng):
    F = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
    assert np.allclose(project_channels(F, ChannelProjection(4, 4, identity=True)), F)
    proj = ChannelProjection(8, 4, rng=rng)
    y = proj(rng.normal(size=(1, 8, 4, 4)).astype(np.float32))
    assert y.shape == (1, 4, 4, 4) and LocalGramTokens(1)(y).shape == (1, 1, 16)
    with pytest.raises(ConfigError):
        ChannelProjection(4, 0)


def test_partition_examples_and_inverse(rng):
    F = rng.normal(size=(2, 3, 16, 16))
    P = partition_patches(F, 4)
    assert P.shape == (2, 16, 3, 16)
    # row-major patch order: patch 1 is the second tile along the width
    assert np.array_equal(P[0, 1].reshape(3, 4, 4), F[0, :, 0:4, 4:8])
    assert np.array_equal(P[0, 4].reshape(3, 4, 4), F[0, :, 4:8, 0:4])
    assert np.array_equal(merge_patches(P, 4, 16, 16), F)
    assert np.allclose(gram_local(partition_patches(F, 1))[:, 0], gram_global(F))
    with pytest.raises(ConfigError, match="16x16"):
        partition_patches(F, 3)


def test_within_patch_permutation_vs_across_patch_swap(rng):
    F = rng.normal(size=(1, 2, 8, 8))
    base = LocalGramTokens(2)(F)
    G = F.copy()
    G[0, :, 0:4, 0:4] = G[0, :, 0:4, 0:4][:, ::-1, ::-1]
    within = LocalGramTokens(2)(G)
    assert np.allclose(within, base, atol=1e-12)
    H = F.copy()
    H[0, :, 0, 0], H[0, :, 0, 7] = F[0, :, 0, 7], F[0, :, 0, 0]
    across = LocalGramTokens(2)(H)
    changed = [i for i in range(4) if not np.allclose(across[0, i], base[0, i])]
    assert changed == [0, 1]


def test_local_gram_rank_one_and_naive_oracle(rng):
    v = np.array([1.5, -2.0, 0.5])
    F = np.ones((1, 3, 4, 4)) * v[None, :, None, None]
    assert np.allclose(gram_local(partition_patches(F, 2))[0], np.outer(v, v))
    F = rng.normal(size=(1, 3, 6, 6))
    G = gram_local(partition_patches(F, 3))[0]
    for i in range(9):
        r, c = divmod(i, 3)
        assert np.max(np.abs(G[i] - naive_gram(F[0, :, 2 * r:2 * r + 2, 2 * c:2 * c + 2]))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(maps, st.sampled_from([1, 2]))
def test_decomposition_identity(F, d):
    S, A = F.shape[2] * F.shape[3], F.shape[2] * F.shape[3] // d ** 2
    local = gram_local(partition_patches(F, d))
    assert np.max(np.abs((A / S) * local.sum(axis=1) - gram_global(F))) < 1e-6 * max(1.0, np.abs(F).max() ** 2)


def test_token_i_depends_only_on_patch_i(rng):
    F = rng.normal(size=(1, 3, 8, 8))
    base = LocalGramTokens(2)(F)
    for other in range(4):
        G = F.copy()
        r, c = divmod(other, 2)
        G[0, :, 4 * r:4 * r + 4, 4 * c:4 * c + 4] = 0
        t = LocalGramTokens(2)(G)
        for i in range(4):
            if i != other:
                assert np.array_equal(t[0, i], base[0, i])


def test_tokenize_layout_equivariance_and_identical_patches(rng):
    assert vec(np.array([[1, 2], [2, 3]])).tolist() == [1, 2, 2, 3]
    proj = TokenProjection(2, 5, rng=rng)
    patch = rng.normal(size=(2, 4, 4))
    F = np.tile(patch, (1, 2, 2))[None]
    ts = tokenize(gram_local(partition_patches(F, 2)), proj, 2, 4, 4)
    assert ts.tokens.shape == (1, 4, 5) and ts.area == 16
    assert np.allclose(ts.tokens[0], ts.tokens[0, :1])
    F = rng.normal(size=(1, 2, 8, 8))
    Fs = F.copy()
    Fs[..., 0:4, 0:4], Fs[..., 4:8, 4:8] = F[..., 4:8, 4:8], F[..., 0:4, 0:4]
    a = tokenize(gram_local(partition_patches(F, 2)), proj, 2, 4, 4).tokens[0]
    b = tokenize(gram_local(partition_patches(Fs, 2)), proj, 2, 4, 4).tokens[0]
    assert np.array_equal(b[[3, 1, 2, 0]], a)


@pytest.mark.parametrize("seed", range(3))
def test_style_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        mods = [(GlobalGram(), rng.normal(size=(2, 3, 4, 4))),
                (LocalGramTokens(2), rng.normal(size=(2, 3, 4, 4))),
                (ChannelProjection(4, 2, rng=rng), rng.normal(size=(2, 4, 3, 3))),
                (TokenProjection(2, 3, rng=rng), rng.normal(size=(2, 4, 4))),
                (Linear(4, 3, rng=rng), rng.normal(size=(2, 4)))]
    for mod, x in mods:
        rep = check_module(mod, x, seed)
        assert rep.ok(1e-4), (type(mod).__name__, rep)
