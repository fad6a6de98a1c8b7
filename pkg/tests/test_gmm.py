import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from facml.counters import OpCounter
from facml.errors import ShapeError, SingularCovariance, StaleCache
from facml.gmm import (
    GmmConfig,
    GmmParams,
    Responsibilities,
    build_rtuple_cache,
    estep,
    gaussian_logpdf,
    init_params,
    mean_pass,
    mstep,
    precompute_precision,
    quadform_blocks,
    quadform_direct,
    quadform_factorized,
    quadform_multiway,
    regularize,
    sigma_pass,
    train_gmm,
)
from facml.relstore import make_source

from conftest import brute_join, make_binary


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def ridged(sigma):
    """Covariance as used by the likelihood: ridge 1e-6 * trace/d on the diagonal."""
    d = len(sigma)
    return sigma + 1e-6 * np.trace(sigma) / d * np.eye(d)


def random_params(rng, K, d):
    pi = rng.uniform(0.5, 1.5, K)
    return GmmParams(pi / pi.sum(), rng.normal(size=(K, d)),
                     np.stack([random_spd(rng, d) for _ in range(K)]))


def oracle_em_step(x, params):
    """Textbook EM iteration on the joined matrix (no factorization)."""
    K = params.K
    dens = np.column_stack([params.pi[k] * multivariate_normal(params.mu[k], ridged(params.sigma[k])).pdf(x)
                            for k in range(K)])
    ll = np.log(dens.sum(axis=1)).sum()
    gamma = dens / dens.sum(axis=1, keepdims=True)
    Nk = gamma.sum(axis=0)
    mu = gamma.T @ x / Nk[:, None]
    sigma = np.stack([((x - mu[k]) * gamma[:, k:k + 1]).T @ (x - mu[k]) / Nk[k] for k in range(K)])
    return gamma, ll, GmmParams(Nk / len(x), mu, sigma)


class TestPrecision:
    def test_identity(self):
        p = precompute_precision(GmmParams(np.ones(1), np.zeros((1, 2)), np.eye(2)[None]))
        np.testing.assert_allclose(p.precision[0], np.eye(2) / (1 + 1e-6), rtol=1e-14)
        assert p.log_det[0] == pytest.approx(2 * np.log1p(1e-6), rel=1e-9)

    def test_diag_logdet(self):
        p = precompute_precision(GmmParams(np.ones(1), np.zeros((1, 2)), np.diag([4.0, 1.0])[None]))
        eps = 1e-6 * 2.5
        assert p.log_det[0] == pytest.approx(np.log((4 + eps) * (1 + eps)), rel=1e-12)

    def test_multiply_back(self):
        rng = np.random.default_rng(3)
        s = random_spd(rng, 6)
        p = precompute_precision(GmmParams(np.ones(1), np.zeros((1, 6)), s[None]), [0, 2, 6])
        np.testing.assert_allclose(p.precision[0] @ ridged(s), np.eye(6), atol=1e-10)
        np.testing.assert_array_equal(p.block(0, 0, 1), p.block(0, 1, 0).T)
        assert p.n_blocks == 2

    def test_bad_offsets(self):
        with pytest.raises(ShapeError):
            precompute_precision(GmmParams(np.ones(1), np.zeros((1, 3)), np.eye(3)[None]), [0, 2])

    def test_ridge(self):
        s, eps = regularize(np.eye(3))
        assert eps == 1e-6
        np.testing.assert_array_equal(s, (1 + 1e-6) * np.eye(3))
        # all data at one point: the covariance collapses to the ridge
        s, eps = regularize(np.zeros((3, 3)))
        np.testing.assert_allclose(s, 1e-6 * np.eye(3))
        with pytest.raises(SingularCovariance):
            regularize(np.diag([1.0, -1.0]))

    @pytest.mark.parametrize("lam", [-1e-13, 0.0, 1e-13])
    def test_ridge_stable_under_roundoff(self, lam):
        # eigenvalues straddling zero get the same ridge
        s, eps = regularize(np.diag([1.0, 1.0, lam]))
        assert eps == pytest.approx(1e-6 * (2 + lam) / 3)


class TestQuadform:
    def test_direct_examples(self):
        assert quadform_direct([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0.0
        assert quadform_direct([3.0, 4.0], [0.0, 0.0], np.eye(2)) == 25.0
        with pytest.raises(ShapeError):
            quadform_direct([1.0], [1.0, 2.0], np.eye(2))

    def test_direct_scalar_loop(self):
        rng = np.random.default_rng(0)
        x, mu, I = rng.normal(size=5), rng.normal(size=5), random_spd(rng, 5)
        loop = sum((x[i] - mu[i]) * I[i, j] * (x[j] - mu[j]) for i in range(5) for j in range(5))
        assert quadform_direct(x, mu, I) == pytest.approx(loop, rel=1e-13)

    def _prec(self, I, offsets):
        return precompute_precision(GmmParams(np.ones(1), np.zeros((1, len(I))),
                                              np.linalg.inv(I)[None]), offsets)

    def test_factorized_unit(self):
        prec = self._prec(np.eye(2), [0, 1, 2])
        cache = build_rtuple_cache(np.array([[1.0]]), np.zeros((1, 2)), prec)
        assert quadform_factorized(np.array([1.0]), cache, 0, 0, prec) == pytest.approx(2.0)

    def test_block_diagonal(self):
        rng = np.random.default_rng(1)
        I = np.zeros((5, 5))
        I[:2, :2], I[2:, 2:] = random_spd(rng, 2), random_spd(rng, 3)
        prec = self._prec(I, [0, 2, 5])
        xr, pds = rng.normal(size=(1, 3)), rng.normal(size=2)
        cache = build_rtuple_cache(xr, np.zeros((1, 5)), prec)
        ul = pds @ prec.block(0, 0, 0) @ pds
        lr = xr[0] @ prec.block(0, 1, 1) @ xr[0]
        assert quadform_factorized(pds, cache, 0, 0, prec) == pytest.approx(ul + lr, rel=1e-12)

    def test_stale_cache(self):
        rng = np.random.default_rng(2)
        params = random_params(rng, 2, 3)
        prec = precompute_precision(params, [0, 1, 3])
        cache = build_rtuple_cache(rng.normal(size=(4, 2)), params.mu, prec)
        newer = precompute_precision(params, [0, 1, 3])
        with pytest.raises(StaleCache):
            quadform_factorized(np.zeros(1), cache, 0, 0, newer)

    @settings(max_examples=200, deadline=None)
    @given(d_s=st.integers(1, 8), d_r=st.lists(st.integers(1, 12), min_size=1, max_size=3),
           seed=st.integers(0, 2**32 - 1))
    def test_factorized_equals_direct(self, d_s, d_r, seed):
        rng = np.random.default_rng(seed)
        widths = [d_s, *d_r]
        d = sum(widths)
        offsets = np.concatenate([[0], np.cumsum(widths)])
        params = random_params(rng, 1, d)
        prec = precompute_precision(params, offsets)
        x = rng.normal(size=d) * 3
        direct = quadform_direct(x, params.mu[0], prec.precision[0])
        caches = [build_rtuple_cache(x[None, offsets[i]:offsets[i + 1]], params.mu, prec, i)
                  for i in range(1, len(widths))]
        pd_s = x[:d_s] - params.mu[0, :d_s]
        got = quadform_multiway(pd_s, caches, [0] * len(caches), 0, prec) if len(caches) > 1 \
            else quadform_factorized(pd_s, caches[0], 0, 0, prec)
        assert abs(got - direct) <= 1e-10 * (1 + abs(direct))
        blocks = [x[offsets[i]:offsets[i + 1]] - params.mu[0, offsets[i]:offsets[i + 1]]
                  for i in range(len(widths))]
        assert abs(quadform_blocks(blocks, prec.precision[0], offsets) - direct) \
            <= 1e-10 * (1 + abs(direct))

    def test_multiway_zero_and_reduction(self):
        rng = np.random.default_rng(5)
        params = random_params(rng, 1, 6)
        prec = precompute_precision(params, [0, 2, 4, 6])
        caches = [build_rtuple_cache(params.mu[:, o:o + 2], params.mu, prec, i)
                  for i, o in ((1, 2), (2, 4))]
        assert quadform_multiway(np.zeros(2), caches, [0, 0], 0, prec) == 0.0
        p1 = precompute_precision(params, [0, 2, 6])
        xr = rng.normal(size=(1, 4))
        c1 = build_rtuple_cache(xr, params.mu, p1, 1)
        pd_s = rng.normal(size=2)
        assert quadform_multiway(pd_s, [c1], [0], 0, p1) == \
            pytest.approx(quadform_factorized(pd_s, c1, 0, 0, p1), rel=1e-14)


class TestLogpdf:
    def _prec(self, sigma):
        d = len(sigma)
        return precompute_precision(GmmParams(np.ones(1), np.zeros((1, d)), sigma[None]))

    def test_analytic(self):
        # the 1e-6 ridge shifts these by about 5e-7 per dimension
        assert gaussian_logpdf(0.0, self._prec(np.eye(1)), 0) == pytest.approx(-0.9189385, abs=1e-6)
        assert gaussian_logpdf(0.0, self._prec(np.eye(2)), 0) == pytest.approx(-1.8378771, abs=2e-6)

    def test_against_scipy(self):
        rng = np.random.default_rng(4)
        s = random_spd(rng, 4)
        mu, x = rng.normal(size=4), rng.normal(size=4)
        prec = self._prec(s)
        q = quadform_direct(x, mu, prec.precision[0])
        assert gaussian_logpdf(q, prec, 0) == \
            pytest.approx(multivariate_normal(mu, ridged(s)).logpdf(x), rel=1e-12)


@pytest.fixture
def small(tmp_path):
    return make_binary(tmp_path / "g", n_S=500, n_R=25, d_S=2, d_R=3, with_target=False,
                       page_rows=32, block_pages=2)


class TestEstep:
    def test_k1_and_symmetric(self, small):
        cat, spec, _ = small
        src = make_source("f", cat, spec)
        rng = np.random.default_rng(0)
        p1 = random_params(rng, 1, 5)
        r = estep(src, p1, precompute_precision(p1, [0, 2, 5]))
        np.testing.assert_array_equal(r.gamma, 1.0)
        p2 = GmmParams(np.array([0.5, 0.5]), np.repeat(p1.mu, 2, 0), np.repeat(p1.sigma, 2, 0))
        r = estep(src, p2, precompute_precision(p2, [0, 2, 5]))
        np.testing.assert_allclose(r.gamma, 0.5, rtol=1e-14)

    @pytest.mark.parametrize("strategy", ["m", "s", "f"])
    def test_against_scipy_oracle(self, small, strategy):
        cat, spec, _ = small
        x, _, _ = brute_join(cat, spec)
        params = random_params(np.random.default_rng(1), 3, 5)
        gamma, ll, _ = oracle_em_step(x, params)
        r = estep(make_source(strategy, cat, spec), params, precompute_precision(params, [0, 2, 5]))
        np.testing.assert_allclose(r.gamma, gamma, rtol=1e-9, atol=1e-12)
        assert r.loglik == pytest.approx(ll, rel=1e-11)
        np.testing.assert_allclose(r.gamma.sum(axis=1), 1.0, atol=1e-12)
        assert r.Nk.sum() == pytest.approx(len(x), rel=1e-12)


class TestMstep:
    @pytest.mark.parametrize("strategy,mode", [("m", "grouped"), ("s", "grouped"),
                                               ("f", "grouped"), ("f", "paper")])
    def test_against_oracle(self, small, strategy, mode):
        cat, spec, _ = small
        x, _, _ = brute_join(cat, spec)
        params = random_params(np.random.default_rng(2), 3, 5)
        _, _, want = oracle_em_step(x, params)
        src = make_source(strategy, cat, spec)
        resp = estep(src, params, precompute_precision(params, [0, 2, 5]))
        got = mstep(src, resp, params, mode=mode)
        np.testing.assert_allclose(got.pi, want.pi, rtol=1e-9)
        np.testing.assert_allclose(got.mu, want.mu, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got.sigma, want.sigma, rtol=1e-8, atol=1e-12)

    def test_k1_mle(self, small):
        cat, spec, _ = small
        x, _, _ = brute_join(cat, spec)
        src = make_source("f", cat, spec)
        params = random_params(np.random.default_rng(0), 1, 5)
        resp = estep(src, params, precompute_precision(params, [0, 2, 5]))
        got = mstep(src, resp, params)
        np.testing.assert_allclose(got.mu[0], x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(got.sigma[0], np.cov(x.T, bias=True), rtol=1e-10, atol=1e-12)
        assert got.pi[0] == 1.0

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), mode=st.sampled_from(["grouped", "paper"]))
    def test_blocks_equal_direct_multiway(self, tmp_path_factory, seed, mode):
        from conftest import make_multiway

        cat, spec = make_multiway(tmp_path_factory.mktemp("mw"), n_S=300, n_R=(20, 6),
                                  d_S=2, d_R=(2, 3), seed=seed, page_rows=16)
        x, _, _ = brute_join(cat, spec)
        rng = np.random.default_rng(seed)
        gamma = rng.dirichlet(np.ones(3), size=len(x))
        resp = Responsibilities(gamma, gamma.sum(axis=0), 0.0)
        mu = rng.normal(size=(3, 7))
        src = make_source("f", cat, spec)
        c = OpCounter()
        acc = sigma_pass(src, resp, mu, c, mode)
        direct = np.stack([((x - mu[k]) * gamma[:, k:k + 1]).T @ (x - mu[k]) for k in range(3)])
        assert np.max(np.abs(acc - direct)) <= 1e-10 * np.max(np.abs(direct))
        np.testing.assert_allclose(mean_pass(src, resp, c), gamma.T @ x, rtol=1e-10)


class TestTrain:
    def test_huge_tol_stops_after_one(self, small):
        cat, spec, _ = small
        _, trace = train_gmm(make_source("f", cat, spec), GmmConfig(K=2, tol=1e30))
        assert len(trace.iterations) == 1 and trace.converged

    def test_init_is_strategy_independent(self, small):
        cat, spec, _ = small
        inits = [init_params(make_source(s, cat, spec), 3, 7)[0] for s in "msf"]
        for p in inits[1:]:
            np.testing.assert_array_equal(p.mu, inits[0].mu)
            np.testing.assert_allclose(p.sigma, inits[0].sigma, rtol=1e-12)

    def test_trace_schema(self, small, tmp_path):
        cat, spec, _ = small
        _, trace = train_gmm(make_source("s", cat, spec), GmmConfig(K=2, max_iters=3))
        for it in trace.iterations:
            assert {"loglik", "phase_times_ms", "pages_read", "mults", "subs"} <= set(it)
        trace.write_json(tmp_path / "t.json")
        assert (tmp_path / "t.json").stat().st_size > 0

    def test_simplex_and_monotone(self, small):
        cat, spec, _ = small
        _, trace = train_gmm(make_source("f", cat, spec),
                             GmmConfig(K=3, max_iters=15, record_params=True))
        for p in trace.params:
            assert p.pi.sum() == pytest.approx(1.0, abs=1e-12) and np.all(p.pi > 0)
            assert np.all(np.linalg.eigvalsh(p.sigma) > 0)
        ll = trace.logliks
        assert all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(ll, ll[1:]))

    def test_empty_component_reseeded(self, small):
        cat, spec, _ = small
        src = make_source("m", cat, spec)
        params = random_params(np.random.default_rng(0), 2, 5)
        params.mu[1] = 1e6   # nobody belongs to this component
        _, trace = train_gmm(src, GmmConfig(K=2, max_iters=2, record_params=True), init=params)
        p = trace.params[0]
        assert np.all(np.abs(p.mu[1]) < 1e3) and p.pi.sum() == pytest.approx(1.0)

    def test_wrong_init_dimension(self, small):
        cat, spec, _ = small
        with pytest.raises(ShapeError):
            train_gmm(make_source("f", cat, spec), GmmConfig(K=2),
                      init=random_params(np.random.default_rng(0), 2, 4))

    @pytest.mark.parametrize("mode", ["grouped", "paper"])
    def test_sigma_count_formula(self, small, mode):
        cat, spec, _ = small
        src = make_source("f", cat, spec)
        x, _, _ = brute_join(cat, spec)
        n_s, n_r, d_s, d_r, K = 500, 25, 2, 3, 2
        gamma = np.random.default_rng(0).dirichlet(np.ones(K), size=n_s)
        resp = Responsibilities(gamma, gamma.sum(0), 0.0)
        c = OpCounter()
        sigma_pass(src, resp, np.zeros((K, 5)), c, mode)
        if mode == "paper":
            assert c.get("mults") == K * (n_s * (d_s ** 2 + 2 * d_s * d_r) + n_r * d_r ** 2)
        c = OpCounter()
        sigma_pass(make_source("m", cat, spec), resp, np.zeros((K, 5)), c)
        assert c.get("mults") == K * n_s * 25
