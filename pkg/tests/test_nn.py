import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facml.errors import ShapeError, StaleCache
from facml.nn import (
    ACTIVATIONS,
    MlpParams,
    NnConfig,
    activation_apply,
    backward,
    build_rtuple_cache_nn,
    forward_first_layer,
    forward_first_layer_factorized,
    forward_first_layer_multiway,
    forward_full,
    mse_loss,
    train_nn,
)
from facml.relstore import make_source
from facml.verify import nn_gradients

from conftest import brute_join, make_binary


def loss_of(params, x, y):
    a, _ = forward_first_layer(x, params)
    o, _ = forward_full(params, a)
    return mse_loss(o, y)


def numeric_gradients(params, x, y, h=1e-6):
    out = []
    for arrs in (params.W, params.b):
        grads = []
        for arr in arrs:
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss_of(params, x, y)
                arr[idx] = old - h
                down = loss_of(params, x, y)
                arr[idx] = old
                g[idx] = (up - down) / (2 * h)
            grads.append(g)
        out.append(grads)
    return out


def analytic(params, x, y):
    a, _ = forward_first_layer(x, params)
    o, acts = forward_full(params, a)
    return backward(params, acts, o, y, [x])


class TestActivations:
    def test_values(self):
        v, dv = activation_apply("sigmoid", 0.0)
        assert (v, dv) == (0.5, 0.25)
        np.testing.assert_array_equal(activation_apply("relu", np.array([-1.0, 2.0]))[0], [0, 2])
        with pytest.raises(ValueError):
            activation_apply("softsign", 1.0)

    @pytest.mark.parametrize("kind", ACTIVATIONS)
    def test_derivative_fd(self, kind):
        rng = np.random.default_rng(0)
        a = rng.uniform(-3, 3, 200)
        if kind == "relu":
            a = a[np.abs(a) > 1e-3]
        h = 1e-6
        fd = (activation_apply(kind, a + h)[0] - activation_apply(kind, a - h)[0]) / (2 * h)
        np.testing.assert_allclose(activation_apply(kind, a)[1], fd, atol=1e-8)


class TestForward:
    def test_zero_weights(self):
        p = MlpParams([np.zeros((3, 4)), np.ones((1, 3))], [np.full(3, 0.7), np.zeros(1)])
        a, _ = forward_first_layer(np.random.default_rng(0).normal(size=(5, 4)), p)
        np.testing.assert_array_equal(a, 0.7)

    def test_hand_relu(self):
        p = MlpParams([np.ones((1, 3)), np.ones((1, 1))], [np.array([0.25]), np.array([0.5])])
        a, _ = forward_first_layer(np.array([[1.0, 2.0, 3.0]]), p)
        o, _ = forward_full(p, a)
        assert o[0] == 6.0 + 0.25 + 0.5

    @pytest.mark.parametrize("kind", ["tanh", "relu"])
    def test_zero_input(self, kind):
        p = MlpParams.init([4, 5, 1], kind, seed=1)
        a, _ = forward_first_layer(np.zeros((2, 4)), p)
        np.testing.assert_array_equal(forward_full(p, a)[0], 0.0)

    def test_factorized_equals_direct(self):
        rng = np.random.default_rng(2)
        p = MlpParams.init([5, 7, 1], "tanh", seed=3)
        p.b[0][:] = rng.normal(size=7)
        xs, xr = rng.normal(size=(30, 2)), rng.normal(size=(4, 3))
        g = rng.integers(0, 4, 30)
        cache = build_rtuple_cache_nn(xr, p, [2, 3])
        a_f, _ = forward_first_layer_factorized(xs, [cache], g[:, None], p, [2, 3])
        a_m, _ = forward_first_layer(np.hstack([xs, xr[g]]), p)
        np.testing.assert_allclose(a_f, a_m, rtol=0, atol=1e-12)

    def test_multiway(self):
        rng = np.random.default_rng(4)
        widths = [2, 3, 2]
        p = MlpParams.init([7, 4, 1], "relu", seed=0)
        p.b[0][:] = 0.3
        xs, r1, r2 = rng.normal(size=(20, 2)), rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
        g = np.column_stack([rng.integers(0, 5, 20), rng.integers(0, 3, 20)])
        caches = [build_rtuple_cache_nn(r1, p, widths, 1), build_rtuple_cache_nn(r2, p, widths, 2)]
        a, _ = forward_first_layer_multiway(xs, caches, g, p, widths)
        a_m, _ = forward_first_layer(np.hstack([xs, r1[g[:, 0]], r2[g[:, 1]]]), p)
        np.testing.assert_allclose(a, a_m, atol=1e-12)
        # zero R weights leave W_S x_S + b
        p.W[0][:, 2:] = 0
        p.bump()
        caches = [build_rtuple_cache_nn(r1, p, widths, 1), build_rtuple_cache_nn(r2, p, widths, 2)]
        a, _ = forward_first_layer_multiway(xs, caches, g, p, widths)
        np.testing.assert_allclose(a, xs @ p.W[0][:, :2].T + 0.3, atol=1e-12)
        with pytest.raises(ShapeError):
            forward_first_layer_multiway(xs, caches[:1], g[:, :1], p, [2, 5])

    def test_stale_cache(self):
        p = MlpParams.init([3, 2, 1], seed=0)
        cache = build_rtuple_cache_nn(np.ones((1, 2)), p, [1, 2])
        p.bump()
        with pytest.raises(StaleCache):
            forward_first_layer_factorized(np.ones((1, 1)), [cache], np.zeros((1, 1), int), p,
                                           [1, 2])


class TestLoss:
    def test_values(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert mse_loss([3.0], [1.0]) == 2.0
        with pytest.raises(ShapeError):
            mse_loss([1.0], [1.0, 2.0])

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        o, y = rng.normal(size=17), rng.normal(size=17)
        loop = 0.0
        for i in range(17):
            loop += (o[i] - y[i]) ** 2
        assert mse_loss(o, y) == pytest.approx(loop / 34, rel=1e-14)


class TestBackward:
    def test_zero_residual(self):
        p = MlpParams.init([3, 4, 1], "tanh", seed=0)
        x = np.random.default_rng(0).normal(size=(6, 3))
        a, _ = forward_first_layer(x, p)
        o, _ = forward_full(p, a)
        g = analytic(p, x, o.copy())
        assert np.all(g.flat() == 0)

    @pytest.mark.parametrize("kind", ACTIVATIONS)
    def test_finite_differences(self, kind):
        rng = np.random.default_rng(11)
        p = MlpParams.init([5, 4, 1], kind, seed=2)
        p.b[0][:] = rng.normal(size=4) * 0.5
        x, y = rng.normal(size=(12, 5)), rng.normal(size=12)
        if kind == "relu":
            a, _ = forward_first_layer(x, p)
            x = x[np.all(np.abs(a) > 1e-3, axis=1)]
            y = y[:len(x)]
        g = analytic(p, x, y)
        (nW, nb) = numeric_gradients(p, x, y)
        for got, want in zip(g.dW + g.db, nW + nb):
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_split_blocks(self):
        rng = np.random.default_rng(1)
        p = MlpParams.init([5, 3, 1], "sigmoid", seed=0)
        xs, xr = rng.normal(size=(10, 2)), rng.normal(size=(3, 3))
        g = rng.integers(0, 3, 10)
        x = np.hstack([xs, xr[g]])
        y = rng.normal(size=10)
        a, _ = forward_first_layer(x, p)
        o, acts = forward_full(p, a)
        full = backward(p, acts, o, y, [x])
        split = backward(p, acts, o, y, [xs, xr], g[:, None])
        blocks = split.first_layer_blocks([2, 3])
        np.testing.assert_allclose(np.hstack(blocks), full.dW[0], rtol=1e-13)
        with pytest.raises(ShapeError):
            backward(p, acts, o, y, [xs, xr])


@pytest.fixture
def nn_data(tmp_path):
    return make_binary(tmp_path / "nn", n_S=400, n_R=20, d_S=2, d_R=3, page_rows=32,
                       block_pages=2)


class TestTraining:
    def test_lr_zero(self, nn_data):
        cat, spec, _ = nn_data
        init = MlpParams.init([5, 4, 1], seed=0)
        params, _ = train_nn(make_source("f", cat, spec), NnConfig(epochs=3, hidden=(4,), lr=0.0),
                             init=init)
        for a, b in zip(params.W + params.b, init.W + init.b):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("kind", ACTIVATIONS)
    def test_gradient_matches_numpy_oracle(self, nn_data, kind):
        cat, spec, _ = nn_data
        x, y, _ = brute_join(cat, spec)
        p = MlpParams.init([5, 6, 1], kind, seed=4)
        p.b[0][:] = 0.1
        want = analytic(p, x, y).flat()
        for s in "msf":
            got = nn_gradients(make_source(s, cat, spec), p, chunk_rows=64).flat()
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-14)

    def test_two_hidden_layers(self, nn_data):
        cat, spec, _ = nn_data
        x, y, _ = brute_join(cat, spec)
        p = MlpParams.init([5, 4, 3, 1], "relu", seed=6)
        want = analytic(p, x, y).flat()
        for s in "sf":
            got = nn_gradients(make_source(s, cat, spec), p, chunk_rows=64).flat()
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("mode", ["batch", "minibatch", "sgd"])
    def test_strategies_agree(self, nn_data, mode):
        cat, spec, _ = nn_data
        cfg = NnConfig(epochs=3, hidden=(6,), lr=0.05, batch_mode=mode, batch_groups=4, seed=1,
                       record_params=True)
        traces = {s: train_nn(make_source(s, cat, spec), cfg)[1] for s in "msf"}
        for s in "sf":
            np.testing.assert_allclose(traces[s].losses, traces["m"].losses, rtol=1e-10)
            for a, b in zip(traces[s].params[-1].W, traces["m"].params[-1].W):
                np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-13)
        if mode == "sgd":
            assert traces["f"].epochs[0]["steps"] == 20

    def test_loss_decreases(self, nn_data):
        cat, spec, _ = nn_data
        _, trace = train_nn(make_source("f", cat, spec),
                            NnConfig(epochs=10, hidden=(8,), lr=0.01, batch_mode="minibatch",
                                     batch_groups=2))
        assert trace.losses[-1] < trace.losses[0]

    def test_counters(self, nn_data):
        cat, spec, _ = nn_data
        n_s, n_r, d_s, d_r, n_h = 400, 20, 2, 3, 6
        cfg = NnConfig(epochs=1, hidden=(n_h,))
        f = train_nn(make_source("f", cat, spec), cfg)[1].epochs[0]
        m = train_nn(make_source("m", cat, spec), cfg)[1].epochs[0]
        assert f["layer1_mults"] == n_s * n_h * d_s + n_r * n_h * d_r
        assert m["layer1_mults"] == n_s * n_h * (d_s + d_r)
        assert f["field_reads"] == n_s * d_s + n_r * d_r
        assert m["field_reads"] == n_s * (d_s + d_r)

    def test_needs_target(self, tmp_path):
        cat, spec, _ = make_binary(tmp_path / "c", n_S=20, n_R=2, with_target=False)
        with pytest.raises(ShapeError):
            train_nn(make_source("f", cat, spec), NnConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ShapeError):
            NnConfig(batch_mode="full")

    def test_params_roundtrip(self):
        p = MlpParams.init([3, 2, 1], "sigmoid", seed=5)
        q = MlpParams.from_dict(p.to_dict())
        for a, b in zip(p.W + p.b, q.W + q.b):
            np.testing.assert_array_equal(a, b)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), n_h=st.integers(1, 9))
    def test_init_bounds(self, seed, n_h):
        p = MlpParams.init([5, n_h, 1], seed=seed)
        lim = np.sqrt(6 / (5 + n_h))
        assert np.all(np.abs(p.W[0]) <= lim) and np.all(p.b[0] == 0)
