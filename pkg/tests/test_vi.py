import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from gplvmcov.data import SyntheticSpec, generate_synthetic
from gplvmcov.kernels import KERNEL_KINDS, HyperParams, KernelSpec
from gplvmcov.model import ModelParams, PriorConfig
from gplvmcov.vi import (
    FitConfig,
    ParameterLayout,
    UnconstrainedTarget,
    VariationalPosterior,
    build_target,
    elbo_estimate,
    elbo_with_gradient,
    fit,
    select_latent_dim,
)


def conjugate_toy(n_obs=20, prior_var=1.0, lik_var=0.5, seed=0):
    """1-D Gaussian mean with Gaussian prior: everything is closed form."""
    rng = np.random.default_rng(seed)
    x = rng.normal(loc=0.7, scale=math.sqrt(lik_var), size=n_obs)

    def value(z):
        mu = z[0]
        return float(
            stats.norm.logpdf(mu, scale=math.sqrt(prior_var))
            + np.sum(stats.norm.logpdf(x, loc=mu, scale=math.sqrt(lik_var)))
        )

    def value_and_grad(z):
        mu = z[0]
        grad = -mu / prior_var + np.sum(x - mu) / lik_var
        return value(z), np.array([grad])

    target = UnconstrainedTarget(dim=1, value=value, value_and_grad=value_and_grad)
    post_var = 1.0 / (1.0 / prior_var + n_obs / lik_var)
    post_mean = post_var * np.sum(x) / lik_var
    evidence_cov = lik_var * np.eye(n_obs) + prior_var * np.ones((n_obs, n_obs))
    log_evidence = float(stats.multivariate_normal.logpdf(x, mean=np.zeros(n_obs), cov=evidence_cov))
    return target, post_mean, post_var, log_evidence


def small_synthetic(seed=0, n=8, d=30, q=1):
    spec = SyntheticSpec(
        n_assets=n,
        n_days=d,
        latent_dim=q,
        noise_scales=np.full(n, 0.01),
        seed=seed,
        kernel=KernelSpec("linear"),
        hyper=HyperParams(scale=np.ones(n), noise=np.ones(n), kernel_variance=0.03),
    )
    return generate_synthetic(spec)[0]


class TestParameterLayout:
    @pytest.mark.parametrize("kind", KERNEL_KINDS)
    def test_roundtrip_is_identity(self, kind):
        rng = np.random.default_rng(0)
        n, q = 5, 2
        layout = ParameterLayout(KernelSpec(kind), n, q)
        scale = 0.2 + rng.random(n)
        noise = 0.1 + rng.random(n)
        if kind == "linear":
            hyper = HyperParams(scale=scale, noise=noise, kernel_variance=1.7)
        else:
            hyper = HyperParams(scale=scale, noise=noise, lengthscale=0.6)
        params = ModelParams(latents=rng.normal(size=(n, q)), hyper=hyper)
        back = layout.from_unconstrained(layout.to_unconstrained(params))
        assert_allclose(back.latents, params.latents, rtol=1e-14)
        assert_allclose(back.hyper.scale, params.hyper.scale, rtol=1e-14)
        assert_allclose(back.hyper.noise, params.hyper.noise, rtol=1e-14)
        if kind == "linear":
            assert back.hyper.kernel_variance == pytest.approx(1.7, rel=1e-14)
        else:
            assert back.hyper.lengthscale == pytest.approx(0.6, rel=1e-14)

    def test_unit_positive_param_maps_to_zero(self):
        layout = ParameterLayout(KernelSpec("se"), 2, 1)
        hyper = HyperParams(scale=np.ones(2), noise=np.ones(2), lengthscale=1.0)
        params = ModelParams(latents=np.zeros((2, 1)), hyper=hyper)
        vec = layout.to_unconstrained(params)
        assert_allclose(vec[layout.n_latent :], 0.0)

    def test_log_jacobian_is_sum_of_positive_coordinates(self):
        layout = ParameterLayout(KernelSpec("se"), 2, 1)
        vec = np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2])
        assert layout.log_jacobian(vec) == pytest.approx(vec[2:].sum(), rel=1e-15)

    def test_dimension(self):
        layout = ParameterLayout(KernelSpec("m32"), 7, 3)
        assert layout.dim == 7 * 3 + 1 + 2 * 7

    def test_non_finite_rejected(self):
        layout = ParameterLayout(KernelSpec("se"), 2, 1)
        with pytest.raises(ValueError):
            layout.from_unconstrained(np.full(layout.dim, np.nan))


class TestElboEstimate:
    def test_fixed_seed_reproducible(self):
        target, m, v, _ = conjugate_toy()
        q = VariationalPosterior(np.array([m]), np.array([0.5 * math.log(v)]))
        a = elbo_estimate(q, target, 64, np.random.default_rng(42))
        b = elbo_estimate(q, target, 64, np.random.default_rng(42))
        assert a.value == b.value
        assert np.array_equal(a.per_sample, b.per_sample)

    def test_optimal_q_recovers_evidence_within_three_stderr(self):
        target, m, v, log_evidence = conjugate_toy()
        q = VariationalPosterior(np.array([m]), np.array([0.5 * math.log(v)]))
        est = elbo_estimate(q, target, 10_000, np.random.default_rng(0))
        assert abs(est.value - log_evidence) <= 3.0 * est.stderr

    def test_never_exceeds_evidence_beyond_three_stderr(self):
        target, m, v, log_evidence = conjugate_toy()
        rng = np.random.default_rng(1)
        for dm, dv in [(0.0, 0.0), (0.5, 0.0), (-0.3, 0.4), (0.2, -0.5), (1.0, 1.0)]:
            q = VariationalPosterior(
                np.array([m + dm]), np.array([0.5 * math.log(v) + dv])
            )
            est = elbo_estimate(q, target, 10_000, rng)
            assert est.value <= log_evidence + 3.0 * est.stderr

    def test_entropy_doubling_adds_dim_log_two(self):
        rng = np.random.default_rng(2)
        q = VariationalPosterior(rng.normal(size=6), rng.normal(size=6))
        doubled = VariationalPosterior(q.means, q.log_stddevs + math.log(2.0))
        assert doubled.entropy() - q.entropy() == pytest.approx(6 * math.log(2.0), rel=1e-12)


class TestElboGradient:
    @pytest.mark.parametrize("kind", KERNEL_KINDS)
    def test_matches_finite_differences_with_common_random_numbers(self, kind):
        rng = np.random.default_rng(3)
        returns = small_synthetic(seed=4, n=6, d=10)
        target, layout = build_target(returns, KernelSpec(kind), 2, PriorConfig())
        q = VariationalPosterior(
            rng.normal(scale=0.15, size=layout.dim) + _plausible_means(layout, returns),
            np.full(layout.dim, math.log(0.1)),
        )
        eps = rng.standard_normal((64, layout.dim))
        _, g_mean, g_logsd = elbo_with_gradient(q, target, eps)
        h = 1e-5
        for idx in range(layout.dim):
            for which, grad in (("mean", g_mean), ("logsd", g_logsd)):
                up, down = q, q
                delta = np.zeros(layout.dim)
                delta[idx] = h
                if which == "mean":
                    up = VariationalPosterior(q.means + delta, q.log_stddevs)
                    down = VariationalPosterior(q.means - delta, q.log_stddevs)
                else:
                    up = VariationalPosterior(q.means, q.log_stddevs + delta)
                    down = VariationalPosterior(q.means, q.log_stddevs - delta)
                fd = (
                    elbo_with_gradient(up, target, eps)[0]
                    - elbo_with_gradient(down, target, eps)[0]
                ) / (2 * h)
                tol = max(1e-3 * abs(fd), 1e-6)
                assert abs(grad[idx] - fd) <= tol, f"{kind} {which} coordinate {idx}"


def _plausible_means(layout, returns):
    # noise well above scale keeps even the indefinite default m32 gram
    # factorizable for every sampled parameter draw
    means = np.zeros(layout.dim)
    row_std = np.maximum(np.std(returns.values, axis=1), 1e-8)
    means[layout.n_latent] = 0.0
    means[layout.n_latent + 1 : layout.n_latent + 1 + layout.n_assets] = np.log(0.5 * row_std)
    means[layout.n_latent + 1 + layout.n_assets :] = np.log(2.0 * row_std)
    return means


class TestFit:
    def test_improves_on_initialization_and_tracks_restarts(self):
        returns = small_synthetic(seed=5)
        cfg = FitConfig(iterations=200, restarts=2, mc_samples=3, final_elbo_samples=50, seed=1)
        result = fit(returns, KernelSpec("linear"), 1, cfg)
        assert result.final_elbo > result.elbo_trace[0]
        assert result.final_elbo == max(result.restart_elbos)
        assert result.restart_index == int(np.argmax(result.restart_elbos))
        assert result.elbo_trace.shape == (200,)
        assert result.point_params.latents.shape == (8, 1)
        assert result.tickers == returns.tickers
        assert_allclose(result.train_means, returns.values.mean(axis=1))

    def test_same_seed_bit_identical(self):
        returns = small_synthetic(seed=6)
        cfg = FitConfig(iterations=60, restarts=2, mc_samples=2, final_elbo_samples=20, seed=9)
        a = fit(returns, KernelSpec("se"), 2, cfg)
        b = fit(returns, KernelSpec("se"), 2, cfg)
        assert np.array_equal(a.posterior.means, b.posterior.means)
        assert np.array_equal(a.posterior.log_stddevs, b.posterior.log_stddevs)
        assert np.array_equal(a.elbo_trace, b.elbo_trace)
        assert a.final_elbo == b.final_elbo

    def test_thread_count_does_not_change_results(self):
        returns = small_synthetic(seed=7)
        cfg = FitConfig(iterations=60, restarts=4, mc_samples=2, final_elbo_samples=20, seed=3)
        serial = fit(returns, KernelSpec("linear"), 1, cfg, workers=1)
        threaded = fit(returns, KernelSpec("linear"), 1, cfg, workers=4)
        assert np.array_equal(serial.posterior.means, threaded.posterior.means)
        assert serial.restart_elbos == threaded.restart_elbos
        assert serial.restart_index == threaded.restart_index


class TestSelectLatentDim:
    def test_degenerate_range_returns_that_dimension(self):
        returns = small_synthetic(seed=8)
        cfg = FitConfig(iterations=40, restarts=1, mc_samples=2, final_elbo_samples=10, seed=0)
        selection = select_latent_dim(returns, KernelSpec("linear"), [2], cfg)
        assert selection.best_latent_dim == 2
        assert len(selection.table) == 1

    def test_table_shape(self):
        returns = small_synthetic(seed=9)
        cfg = FitConfig(iterations=40, restarts=1, mc_samples=2, final_elbo_samples=10, seed=0)
        selection = select_latent_dim(returns, KernelSpec("linear"), [1, 2, 3], cfg)
        assert len(selection.table) == 3
        for entry in selection.table:
            assert math.isfinite(entry.elbo)
            assert entry.stderr >= 0.0
        assert selection.best_latent_dim in (1, 2, 3)

    def test_empty_range_rejected(self):
        returns = small_synthetic(seed=10)
        cfg = FitConfig(iterations=10, restarts=1, mc_samples=1, final_elbo_samples=10, seed=0)
        with pytest.raises(ValueError):
            select_latent_dim(returns, KernelSpec("linear"), [], cfg)
