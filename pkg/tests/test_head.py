import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import cosine
from jointdet.embedding_io import EmbeddingMatrix
from jointdet.errors import ConflictError, DataError, DegenerateRowError, ShapeError
from jointdet.head import (DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE, FeatureMap, VocabularyPack,
                           classify_conv, reparameterize, score_online, sigmoid)


def naive_scores(e, x, alpha, beta):
    b, _, h, w = x.shape
    out = np.zeros((b, e.shape[0], h, w))
    for n in range(b):
        for k in range(e.shape[0]):
            for i in range(h):
                for j in range(w):
                    out[n, k, i, j] = alpha * cosine(list(x[n, :, i, j]), list(e[k])) + beta
    return out


def test_defaults():
    assert DEFAULT_LOGIT_SCALE == pytest.approx(1 / 0.07)
    assert DEFAULT_LOGIT_BIAS == -10.0


def test_online_matches_naive(rng):
    e = rng.standard_normal((5, 6))
    x = rng.standard_normal((2, 6, 3, 4)).astype(np.float32)
    got = score_online(e, x, 3.0, -1.0).data
    np.testing.assert_allclose(got, naive_scores(e, x, 3.0, -1.0), atol=1e-9)
    assert got.shape == (2, 5, 3, 4)


def test_conv_matches_naive(rng):
    e = rng.standard_normal((4, 8))
    x = rng.standard_normal((1, 8, 2, 5)).astype(np.float32)
    got = classify_conv(reparameterize(e, 7.0, 0.5), x).data
    np.testing.assert_allclose(got, naive_scores(e, x, 7.0, 0.5), atol=1e-5)


def test_zero_cell_scores_bias():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    x = np.zeros((1, 2, 1, 1), np.float32)
    np.testing.assert_array_equal(classify_conv(reparameterize(e, 5, -3), x).data, -3)
    np.testing.assert_array_equal(score_online(e, x, 5, -3).data, -3)


def test_sigmoid_per_class_not_softmax():
    e = np.eye(3)
    x = np.array([1.0, 1.0, 0.0], np.float32).reshape(1, 3, 1, 1)
    p = score_online(e, x, 10, 0, activation="sigmoid").data[0, :, 0, 0]
    assert p[0] == pytest.approx(p[1]) and p[0] > 0.99
    assert p.sum() > 1.0


def test_sigmoid_is_stable():
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    np.testing.assert_allclose(sigmoid(np.array([0.0, 2.0])), [0.5, 1 / (1 + np.exp(-2))])


def test_kernel_rows_have_norm_alpha(rng):
    pack = reparameterize(rng.standard_normal((6, 10)), 4.0, -2.0)
    np.testing.assert_allclose(np.linalg.norm(pack.kernel, axis=1), 4.0, rtol=1e-6)
    assert pack.conv_weight.shape == (6, 10, 1, 1)
    assert pack.kernel.dtype == np.float32


def test_zero_embedding_names_class():
    emb = EmbeddingMatrix(np.array([[1, 0], [0, 0]], np.float32), ["cat", "void"])
    with pytest.raises(DegenerateRowError, match="void"):
        reparameterize(emb)
    with pytest.raises(DegenerateRowError):
        score_online(emb, np.ones((1, 2, 1, 1), np.float32))


def test_pack_validation():
    with pytest.raises(ConflictError):
        VocabularyPack(("a", "a"), np.eye(2) * 2, 2.0)
    with pytest.raises(ShapeError):
        VocabularyPack(("a",), np.eye(2), 1.0)
    with pytest.raises(DataError):
        VocabularyPack(("a", "b"), np.eye(2), 3.0, normalized=True)
    VocabularyPack(("a", "b"), np.eye(2), 3.0, normalized=False)


def test_feature_map_validation():
    with pytest.raises(ShapeError):
        FeatureMap(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((1, 2, 2, 2)), stride=4)
    with pytest.raises(DataError):
        FeatureMap(np.full((1, 1, 1, 1), np.inf))


def test_dim_mismatch_is_shape_error(rng):
    pack = reparameterize(rng.standard_normal((2, 4)))
    with pytest.raises(ShapeError):
        classify_conv(pack, np.zeros((1, 5, 1, 1)))


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    r = np.random.default_rng(seed)
    k, d = draw(st.integers(1, 24)), draw(st.integers(1, 48))
    h, w = draw(st.integers(1, 5)), draw(st.integers(1, 5))
    return (r.standard_normal((k, d)), r.standard_normal((1, d, h, w)).astype(np.float32),
            draw(st.floats(0.5, 30.0)), draw(st.floats(-12.0, 2.0)))


@settings(max_examples=100, deadline=None)
@given(instances())
def test_conv_equals_online(inst):
    e, x, a, b = inst
    conv = classify_conv(reparameterize(e, a, b), x).data
    online = score_online(e, x, a, b).data
    assert np.max(np.abs(conv - online)) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(instances(), st.floats(0.01, 100.0))
def test_scores_invariant_to_feature_scale(inst, c):
    e, x, a, b = inst
    base = score_online(e, x, a, b).data
    scaled = score_online(e, (x * c).astype(np.float32), a, b).data
    np.testing.assert_allclose(scaled, base, atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(instances(), st.integers(0, 2**32 - 1))
def test_class_permutation_permutes_scores(inst, seed):
    e, x, a, b = inst
    perm = np.random.default_rng(seed).permutation(e.shape[0])
    base = classify_conv(reparameterize(e, a, b), x).data
    permuted = classify_conv(reparameterize(e[perm], a, b), x).data
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(instances())
def test_argmax_independent_of_scale_and_bias(inst):
    e, x, a, b = inst
    lhs = np.argmax(score_online(e, x, a, b).data, axis=1)
    rhs = np.argmax(score_online(e, x, 1.0, 0.0).data, axis=1)
    cos = score_online(e, x, 1.0, 0.0).data
    top2 = np.sort(cos, axis=1)
    clear = top2[:, -1] - (top2[:, -2] if e.shape[0] > 1 else -np.inf) > 1e-9
    assert np.array_equal(lhs[clear], rhs[clear])
