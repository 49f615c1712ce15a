import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_mlp
from jointdet import adaptor as mlp
from jointdet.adaptor import (AdaptorConfig, AdaptorParams, backward, decode_params,
                              encode_params, forward, init_params, load_params, save_params)
from jointdet.embedding_io import EmbeddingMatrix
from jointdet.errors import FormatError, LengthError, ShapeError


def _random_params(rng, n, d):
    return AdaptorParams(tuple((rng.standard_normal((d, d)) / np.sqrt(d), 0.1 * rng.standard_normal(d))
                               for _ in range(n)), d)


def test_identity_when_no_layers(rng):
    e = EmbeddingMatrix(rng.standard_normal((4, 6)).astype(np.float32))
    p = init_params(AdaptorConfig(0, 6))
    assert forward(p, e) is e


def test_init_bounds_and_zero_bias():
    p = init_params(AdaptorConfig(3, 64, seed=7))
    bound = np.sqrt(6.0 / 128)
    for w, b in p.layers:
        assert w.dtype == np.float32 and w.shape == (64, 64)
        assert np.abs(w).max() <= bound
        assert not b.any()
    assert p.equal(init_params(AdaptorConfig(3, 64, seed=7)))
    assert not p.equal(init_params(AdaptorConfig(3, 64, seed=8)))


@pytest.mark.parametrize("n", [-1, 9])
def test_layer_count_range(n):
    with pytest.raises(ValueError):
        AdaptorConfig(n, 4)


def test_forward_matches_naive_loops(rng):
    p = _random_params(rng, 3, 5)
    x = rng.standard_normal((7, 5))
    want, _ = naive_mlp(p.layers, x)
    np.testing.assert_allclose(forward(p, x), want, rtol=1e-12, atol=1e-12)


def test_last_layer_is_linear():
    # with W = -I, relu would zero every positive input; a linear last layer keeps the sign flip
    p = AdaptorParams(((-np.eye(2), np.zeros(2)),), 2)
    np.testing.assert_array_equal(forward(p, np.array([[1.0, 2.0]])), [[-1.0, -2.0]])


def test_row_independence(rng):
    p = _random_params(rng, 2, 4)
    x = rng.standard_normal((6, 4))
    full = forward(p, x)
    for i in range(6):
        np.testing.assert_allclose(forward(p, x[i:i + 1])[0], full[i], rtol=0, atol=1e-14)


def test_labels_preserved_and_float32(rng):
    e = EmbeddingMatrix(rng.standard_normal((2, 3)).astype(np.float32), ["x", "y"])
    out = forward(_random_params(rng, 2, 3), e)
    assert out.labels == ("x", "y") or list(out.labels) == ["x", "y"]
    assert out.data.dtype == np.float32


def test_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        forward(_random_params(rng, 1, 3), EmbeddingMatrix(np.ones((1, 4), np.float32)))


def _fd_grad(params, x, upstream, h0=1e-3):
    """Central differences of sum(upstream * forward) with a relu-kink guard."""
    def f(p):
        return float(np.sum(upstream * naive_mlp(p.layers, x)[0]))

    _, base = naive_mlp(params.layers, x)
    grads = []
    for li, (w, b) in enumerate(params.layers):
        dws = np.zeros_like(w, dtype=np.float64)
        dbs = np.zeros_like(b, dtype=np.float64)
        for target, arr in ((dws, w), (dbs, b)):
            for idx in np.ndindex(arr.shape):
                h = h0
                for _ in range(40):
                    pairs = []
                    for sgn in (1, -1):
                        layers = [(ww.astype(np.float64).copy(), bb.astype(np.float64).copy())
                                  for ww, bb in params.layers]
                        which = 0 if arr is w else 1
                        layers[li][which][idx] += sgn * h
                        pairs.append(AdaptorParams(tuple(layers), params.dim))
                    if all(naive_mlp(q.layers, x)[1] == base for q in pairs):
                        break
                    h /= 4
                target[idx] = (f(pairs[0]) - f(pairs[1])) / (2 * h)
        grads.append((dws, dbs))
    return grads


def test_backward_matches_finite_differences(rng):
    p = _random_params(rng, 3, 4)
    x = rng.standard_normal((5, 4))
    up = rng.standard_normal((5, 4))
    got, _ = backward(p, x, up)
    want = _fd_grad(p, x, up)
    for (gw, gb), (ww, wb) in zip(got, want):
        np.testing.assert_allclose(gw, ww, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(gb, wb, rtol=1e-4, atol=1e-7)


def test_backward_input_gradient(rng):
    p = _random_params(rng, 2, 3)
    x = rng.standard_normal((2, 3))
    up = rng.standard_normal((2, 3))
    _, dx = backward(p, x, up)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (np.sum(up * forward(p, xp)) - np.sum(up * forward(p, xm))) / (2 * h)
        assert abs(fd - dx[idx]) <= 1e-6 * max(1.0, abs(fd))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.integers(1, 8))
def test_forward_property_vs_naive(seed, n, d):
    r = np.random.default_rng(seed)
    p = _random_params(r, n, d)
    x = r.standard_normal((3, d))
    want, _ = naive_mlp(p.layers, x) if n else (x, None)
    np.testing.assert_allclose(forward(p, x), want, rtol=1e-10, atol=1e-12)


def test_call_counter_counts_per_thread(rng):
    p = _random_params(rng, 1, 2)
    before = mlp.forward_calls.local_count()
    forward(p, np.ones((1, 2)))
    forward(p, np.ones((1, 2)))
    assert mlp.forward_calls.local_count() - before == 2


def test_dsad_header_by_hand():
    p = AdaptorParams(((np.eye(2, dtype=np.float32), np.array([0.5, -1.0], np.float32)),), 2)
    buf = encode_params(p)
    assert buf[:16] == b"DSAD" + b"\x01\0\0\0" + b"\x01\0\0\0" + b"\x02\0\0\0"
    assert buf[16:32] == np.array([1, 0, 0, 1], "<f4").tobytes()
    assert buf[32:] == np.array([0.5, -1.0], "<f4").tobytes()


@pytest.mark.parametrize("n,d", [(0, 5), (1, 1), (3, 16), (8, 4)])
def test_dsad_roundtrip(tmp_path, n, d):
    p = init_params(AdaptorConfig(n, d, seed=n + d))
    save_params(p, tmp_path / "a.dsad")
    back = load_params(tmp_path / "a.dsad")
    assert back.equal(p)
    assert encode_params(back) == encode_params(p)


def test_dsad_errors():
    good = encode_params(init_params(AdaptorConfig(1, 2)))
    with pytest.raises(LengthError):
        decode_params(good[:-1])
    with pytest.raises(FormatError):
        decode_params(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        decode_params(good[:4] + b"\x09\0\0\0" + good[8:])
