import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from attvad import autodiff as ad
from attvad import layers as L

TOL = 1e-4


def wsum(out, seed=11):
    w = np.random.default_rng(seed).normal(size=ad.value_of(out).shape)
    return ad.sum_(ad.mul(out, w))


def test_lstm_forward_matches_oracle_and_accepts_2d():
    r = np.random.default_rng(0)
    p = L.init_lstm(r, 3, 4)
    x = r.normal(size=(7, 3))
    hmap, (h, c) = L.lstm_forward(p, x)
    assert hmap.shape == (7, 4) and h.shape == (4,) and c.shape == (4,)
    assert np.allclose(hmap, oracles.lstm(x, p.w_ih, p.w_hh, p.b), atol=1e-12)
    batched, _ = L.lstm_forward(p, np.stack([x, x]))
    assert np.allclose(batched[1], hmap, atol=1e-14)


def test_lstm_init_forget_bias_and_shapes():
    p = L.init_lstm(np.random.default_rng(0), 40, 64)
    assert p.w_ih.shape == (256, 40) and p.w_hh.shape == (256, 64) and p.b.shape == (256,)
    assert np.all(p.b[64:128] == 1.0)
    bound = 1 / np.sqrt(104)
    assert np.abs(p.w_ih).max() <= bound and np.abs(p.w_hh).max() <= bound


def test_conv_same_matches_oracle():
    r = np.random.default_rng(1)
    p = L.init_conv1d(r, 3, 5, 11)
    x = r.normal(size=(3, 20))
    assert np.allclose(L.conv1d_same(p, x), oracles.conv1d_same(x, p.w, p.b), atol=1e-12)
    p2 = L.init_conv2d(r, 1, 3, 7, bias=False)
    x2 = r.normal(size=(1, 9, 6))
    assert p2.b is None
    assert np.allclose(L.conv2d_same(p2, x2), oracles.conv2d_same(x2, p2.w), atol=1e-12)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        L.init_conv1d(np.random.default_rng(0), 1, 1, 4)


def test_batchnorm_train_normalizes_and_tracks_stats():
    r = np.random.default_rng(2)
    p = L.init_batchnorm(3, sites=2)
    x = r.normal(loc=4.0, scale=3.0, size=(5, 3, 8))
    y = L.batchnorm(p, x, "train", site=1)
    assert np.allclose(y.mean(axis=(0, 2)), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=(0, 2)), 1.0, atol=1e-3)
    mu, var = x.mean(axis=(0, 2)), x.var(axis=(0, 2))
    assert np.allclose(p.running_mean[1], 0.1 * mu)
    assert np.allclose(p.running_var[1], 0.9 + 0.1 * var)
    assert np.array_equal(p.running_mean[0], np.zeros(3))


def test_batchnorm_eval_uses_running_stats_and_does_not_update():
    p = L.init_batchnorm(2)
    p.running_mean[0] = [1.0, -1.0]
    p.running_var[0] = [4.0, 0.25]
    p.gamma[:] = [2.0, 1.0]
    p.beta[:] = [0.5, 0.0]
    x = np.ones((1, 2, 3))
    y = L.batchnorm(p, x, "eval")
    assert np.allclose(y[0, 0], 2.0 * 0.0 + 0.5)
    assert np.allclose(y[0, 1], 2.0 / np.sqrt(0.25 + 1e-5))
    assert np.array_equal(p.running_mean[0], [1.0, -1.0])


def test_batchnorm_no_track_leaves_stats():
    p = L.init_batchnorm(2)
    L.batchnorm(p, np.random.default_rng(0).normal(size=(2, 2, 4)), "train", track_stats=False)
    assert np.array_equal(p.running_mean, np.zeros((1, 2)))


def test_pool_stats_matches_oracle():
    h = np.random.default_rng(3).normal(size=(6, 4))
    freq = L.pool_stats(h, "frequency")
    time = L.pool_stats(h, "time")
    assert freq.max.shape == (6, 1) and time.std.shape == (1, 4)
    assert np.allclose(np.hstack(freq).T, oracles.pooled(h, 1), atol=1e-12)
    assert np.allclose(np.vstack(time), oracles.pooled(h, 0), atol=1e-12)
    with pytest.raises(ValueError):
        L.pool_stats(h, "space")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_pool_stats_ordering(h):
    for axis in ("time", "frequency"):
        mx, avg, std = L.pool_stats(h, axis)
        assert np.all(mx >= avg - 1e-9)
        assert np.all(std >= 0)


def test_dense_head():
    p = L.DenseParams(np.array([[1.0], [2.0]]), np.array([0.5]))
    out = L.dense(p, np.array([[1.0, 1.0], [0.0, -1.0]]))
    assert np.array_equal(out, [[3.5], [-1.5]])


def test_named_params_order_and_bind():
    r = np.random.default_rng(0)
    tree = [L.init_conv1d(r, 1, 2, 3), L.init_batchnorm(2)]
    names = [n for n, _ in L.named_params(tree)]
    assert names == ["0.w", "0.b", "1.gamma", "1.beta"]
    assert [n for n, _ in L.named_buffers(tree)] == ["1.running_mean", "1.running_var"]
    tape = ad.Tape()
    bound, leaves = L.bind(tree, tape)
    assert len(leaves) == 4
    assert bound[1].running_mean is tree[1].running_mean
    assert [l.value.shape for l in leaves] == [a.shape for _, a in L.named_params(tree)]


# gradient checks for every layer, with respect to inputs and parameters


@pytest.mark.parametrize("seed", range(10))
def test_layer_gradients(seed):
    r = np.random.default_rng(seed)
    lp = L.init_lstm(r, 2, 3)
    x = r.normal(size=(4, 2))
    assert ad.grad_check(lambda v: wsum(L.lstm_forward(lp, v)[0]), x) < TOL
    assert ad.grad_check(lambda v: wsum(L.lstm_forward(L.LstmParams(v, lp.w_hh, lp.b), x)[0]), lp.w_ih) < TOL

    cp = L.init_conv1d(r, 3, 2, 5)
    xc = r.normal(size=(3, 8))
    assert ad.grad_check(lambda v: wsum(L.conv1d_same(cp, v)), xc) < TOL
    assert ad.grad_check(lambda v: wsum(L.conv1d_same(L.ConvParams(v, cp.b), xc)), cp.w) < TOL

    c2 = L.init_conv2d(r, 1, 2, 3)
    x2 = r.normal(size=(1, 4, 5))
    assert ad.grad_check(lambda v: wsum(L.conv2d_same(c2, v)), x2) < TOL

    bp = L.init_batchnorm(2)
    bp.gamma[:] = r.uniform(0.5, 1.5, 2)
    xb = r.normal(size=(3, 2, 4))
    assert ad.grad_check(lambda v: wsum(L.batchnorm(bp, v, "train", track_stats=False)), xb) < TOL
    assert ad.grad_check(lambda v: wsum(L.batchnorm(L.BatchNormParams(v, bp.beta, bp.running_mean, bp.running_var),
                                                    xb, "train", track_stats=False)), bp.gamma) < TOL

    h = r.normal(size=(5, 4))
    for axis in ("time", "frequency"):
        assert ad.grad_check(lambda v: wsum(ad.concat(list(L.pool_stats(v, axis)), axis=0 if axis == "time" else 1)), h) < TOL

    dp = L.init_dense(r, 4)
    assert ad.grad_check(lambda v: wsum(L.dense(dp, v)), h) < TOL
