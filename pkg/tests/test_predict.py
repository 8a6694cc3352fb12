import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from gplvmcov.data import ReturnMatrix, SyntheticSpec, generate_synthetic
from gplvmcov.errors import ValidationError
from gplvmcov.kernels import (
    CovarianceEstimate,
    HyperParams,
    JitterPolicy,
    KernelSpec,
    assemble_covariance,
)
from gplvmcov.model import ModelParams
from gplvmcov.predict import (
    export_embedding,
    gp_conditional,
    loocv_impute,
    mean_abs_dev,
    r2_score,
    reconstruction_r2,
)
from gplvmcov.vi import FitConfig, FitResult, ParameterLayout, VariationalPosterior, fit

BASE_JITTER = JitterPolicy().base_scale


def make_matrix(values, tickers=None):
    values = np.asarray(values, dtype=float)
    n, d = values.shape
    dates = tuple(dt.date(2021, 1, 1) + dt.timedelta(days=i) for i in range(d))
    if tickers is None:
        tickers = tuple(f"T{i}" for i in range(n))
    return ReturnMatrix(tickers=tuple(tickers), dates=dates, values=values)


def fit_result_from_params(params: ModelParams, kernel: KernelSpec, tickers=None):
    """Wrap explicit point parameters in a FitResult for the prediction API."""
    layout = ParameterLayout(kernel, params.n_assets, params.latent_dim)
    vec = layout.to_unconstrained(params)
    q = VariationalPosterior(means=vec, log_stddevs=np.full(layout.dim, -2.0))
    return FitResult(
        posterior=q,
        elbo_trace=np.zeros(1),
        final_elbo=0.0,
        final_elbo_stderr=0.0,
        point_params=params,
        restart_index=0,
        restart_elbos=(0.0,),
        kernel=kernel,
        latent_dim=params.latent_dim,
        tickers=tickers,
        train_means=np.zeros(params.n_assets),
    )


class TestGpConditional:
    def test_hand_computed_two_assets(self):
        cov = CovarianceEstimate(
            matrix=np.array([[1.0, 0.5], [0.5, 1.0]]), estimator_tag="toy"
        )
        dist = gp_conditional(cov, [0], np.array([2.0]), [1])
        assert dist.mean[0] == pytest.approx(1.0, abs=1e-6)
        assert dist.covariance[0, 0] == pytest.approx(0.75, abs=1e-6)

    def test_diagonal_covariance_gives_prior(self):
        cov = CovarianceEstimate(matrix=np.diag([2.0, 3.0]), estimator_tag="diag")
        dist = gp_conditional(cov, [0], np.array([5.0]), [1])
        assert dist.mean[0] == pytest.approx(0.0, abs=1e-9)
        assert dist.covariance[0, 0] == pytest.approx(3.0, rel=1e-6)

    def test_conditioning_never_inflates_variance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(3, 9))
            a = rng.normal(size=(n, n + 2))
            k = a @ a.T / (n + 2) + 0.1 * np.eye(n)
            cov = CovarianceEstimate(matrix=0.5 * (k + k.T), estimator_tag="rand")
            target = int(rng.integers(0, n))
            observed = [i for i in range(n) if i != target]
            dist = gp_conditional(cov, observed, rng.normal(size=n - 1), [target])
            assert dist.covariance[0, 0] <= k[target, target] + 1e-9

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(3, 7))
            a = rng.normal(size=(n, n + 3))
            k = a @ a.T / (n + 3) + 0.05 * np.eye(n)
            k = 0.5 * (k + k.T)
            cov = CovarianceEstimate(matrix=k, estimator_tag="rand")
            split = int(rng.integers(1, n))
            obs = list(range(split))
            tgt = list(range(split, n))
            y = rng.normal(size=split)
            dist = gp_conditional(cov, obs, y, tgt)
            koo = k[np.ix_(obs, obs)] + BASE_JITTER * np.mean(np.diag(k[np.ix_(obs, obs)])) * np.eye(split)
            inv = np.linalg.inv(koo)
            mean = k[np.ix_(tgt, obs)] @ inv @ y
            cond = k[np.ix_(tgt, tgt)] - k[np.ix_(tgt, obs)] @ inv @ k[np.ix_(obs, tgt)]
            assert_allclose(dist.mean, mean, rtol=1e-9, atol=1e-12)
            assert_allclose(dist.covariance, 0.5 * (cond + cond.T), rtol=1e-9, atol=1e-11)

    def test_overlapping_index_sets_rejected(self):
        cov = CovarianceEstimate(matrix=np.eye(3), estimator_tag="eye")
        with pytest.raises(ValueError, match="disjoint"):
            gp_conditional(cov, [0, 1], np.zeros(2), [1, 2])

    def test_predictive_covariance_factorizable(self):
        rng = np.random.default_rng(2)
        from gplvmcov.kernels import safe_cholesky

        for _ in range(100):
            n = int(rng.integers(4, 9))
            a = rng.normal(size=(n, n + 2))
            k = 0.5 * (a @ a.T + (a @ a.T).T) / (n + 2) + 0.1 * np.eye(n)
            cov = CovarianceEstimate(matrix=k, estimator_tag="rand")
            dist = gp_conditional(cov, [0, 1], rng.normal(size=2), list(range(2, n)))
            safe_cholesky(dist.covariance)  # must not raise


class TestR2Score:
    def test_perfect_prediction(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r2_score(y, y) == pytest.approx(1.0)

    def test_mean_prediction_scores_zero(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r2_score(y, np.full(3, 2.0)) == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed(self):
        assert r2_score(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 4.0])) == pytest.approx(0.5)

    def test_constant_actual_rejected(self):
        with pytest.raises(ValidationError, match="constant"):
            r2_score(np.full(4, 1.0), np.zeros(4))

    @given(
        arrays(np.float64, st.integers(3, 10), elements=st.floats(-10, 10)),
        st.floats(-5, 5),
        st.floats(0.1, 4.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, y, shift, gain):
        if np.ptp(y) < 1e-6:
            return
        rng = np.random.default_rng(3)
        f = y + rng.normal(scale=0.5, size=y.shape)
        base = r2_score(y, f)
        transformed = r2_score(gain * y + shift, gain * f + shift)
        assert transformed == pytest.approx(base, rel=1e-9, abs=1e-12)


class TestMeanAbsDev:
    def test_identical(self):
        a = np.ones((2, 2))
        assert mean_abs_dev(a, a) == 0.0

    def test_constant_offset(self):
        a = np.zeros((3, 4))
        assert mean_abs_dev(a, a + 0.01) == pytest.approx(0.01, rel=1e-12)

    def test_hand_average(self):
        actual = np.zeros((2, 2))
        predicted = np.array([[0.1, 0.0], [0.0, -0.1]])
        assert mean_abs_dev(actual, predicted) == pytest.approx(0.05, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mean_abs_dev(np.zeros((2, 2)), np.zeros((2, 3)))


class TestLoocvImpute:
    def test_perfectly_correlated_pair_predicted_exactly(self):
        # two assets with identical latents and near-zero noise; the twin
        # rows in the generated data are exactly equal, so leaving one out
        # recovers it up to the jitter perturbation
        b = np.array([[0.5], [0.5], [-1.0]])
        hyper = HyperParams(
            scale=np.array([0.02, 0.02, 0.02]),
            noise=np.full(3, 1e-8),
            lengthscale=1.0,
        )
        spec = SyntheticSpec(
            n_assets=3, n_days=30, latent_dim=1, noise_scales=np.zeros(3), seed=4,
            kernel=KernelSpec("se"), hyper=hyper, latents=b,
        )
        rm, _, _ = generate_synthetic(spec)
        assert_allclose(rm.values[0], rm.values[1], atol=1e-15)
        cov = assemble_covariance(KernelSpec("se"), b, hyper)
        report = loocv_impute(rm, cov)
        err = np.max(np.abs(report.predicted[0] - report.actual[0]))
        assert err < 1e-6 * np.std(rm.values[0])

    def test_diagonal_covariance_predicts_zero(self):
        cov = CovarianceEstimate(matrix=np.diag([1.0, 2.0, 3.0]), estimator_tag="diag")
        rng = np.random.default_rng(5)
        rm = make_matrix(rng.normal(scale=0.1, size=(3, 12)))
        report = loocv_impute(rm, cov)
        assert_allclose(report.predicted, 0.0, atol=1e-9)
        assert report.r2 <= 0.0

    def test_aggregates_recomputable_from_cells(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 6))
        k = 0.5 * (a @ a.T + (a @ a.T).T) / 6 + 0.2 * np.eye(4)
        cov = CovarianceEstimate(matrix=k * 1e-4, estimator_tag="rand")
        rm = make_matrix(rng.normal(scale=0.02, size=(4, 15)))
        means = rng.normal(scale=0.001, size=4)
        report = loocv_impute(rm, cov, baseline_means=means)
        assert report.r2 == pytest.approx(r2_score(report.actual, report.predicted), rel=1e-12)
        assert report.mean_abs_deviation == pytest.approx(
            mean_abs_dev(report.actual, report.predicted), rel=1e-12
        )
        assert report.baseline_r2 == pytest.approx(
            r2_score(report.actual, report.baseline), rel=1e-12
        )
        assert_allclose(report.baseline[:, 0], means)

    def test_ticker_mismatch_rejected(self):
        cov = CovarianceEstimate(matrix=np.eye(2), estimator_tag="x", tickers=("A", "B"))
        rm = make_matrix(np.zeros((2, 3)) + 0.01, tickers=("A", "C"))
        with pytest.raises(ValidationError, match="C"):
            loocv_impute(rm, cov)


class TestReconstructionR2:
    def _params(self, noise_level):
        rng = np.random.default_rng(7)
        b = rng.normal(size=(6, 2))
        hyper = HyperParams(
            scale=np.full(6, 0.02), noise=np.full(6, noise_level), lengthscale=1.0
        )
        return ModelParams(latents=b, hyper=hyper)

    def test_vanishing_noise_reconstructs_data(self):
        params = self._params(1e-9)
        result = fit_result_from_params(params, KernelSpec("se"))
        rng = np.random.default_rng(8)
        rm = make_matrix(rng.normal(scale=0.02, size=(6, 20)))
        assert reconstruction_r2(rm, result) == pytest.approx(1.0, abs=1e-5)

    def test_vanishing_signal_reconstructs_nothing(self):
        rng = np.random.default_rng(9)
        b = rng.normal(size=(6, 2))
        hyper = HyperParams(
            scale=np.full(6, 1e-9), noise=np.full(6, 0.02), lengthscale=1.0
        )
        result = fit_result_from_params(ModelParams(latents=b, hyper=hyper), KernelSpec("se"))
        rm = make_matrix(rng.normal(scale=0.02, size=(6, 20)))
        r2 = reconstruction_r2(rm, result)
        # all-noise model predicts zero; pooled R^2 sits at or just below 0
        # because the global mean explains a little variance that zero cannot
        assert r2 <= 1e-6
        assert r2 > -0.1


class TestExportEmbedding:
    def test_shape_and_roundtrip(self):
        rng = np.random.default_rng(10)
        b = rng.normal(size=(5, 2))
        hyper = HyperParams(scale=np.full(5, 0.1), noise=np.full(5, 0.05), lengthscale=1.0)
        tickers = tuple(f"T{i}" for i in range(5))
        result = fit_result_from_params(
            ModelParams(latents=b, hyper=hyper), KernelSpec("se"), tickers=tickers
        )
        table = export_embedding(result)
        assert table.coordinates.shape == (5, 2)
        assert table.tickers == tickers
        assert_allclose(table.coordinates, result.point_params.latents)
        assert table.sectors is None

    def test_sector_passthrough(self):
        rng = np.random.default_rng(11)
        b = rng.normal(size=(3, 2))
        hyper = HyperParams(scale=np.full(3, 0.1), noise=np.full(3, 0.05), lengthscale=1.0)
        result = fit_result_from_params(
            ModelParams(latents=b, hyper=hyper), KernelSpec("se"), tickers=("A", "B", "C")
        )
        table = export_embedding(result, sectors={"A": "tech", "C": "energy"})
        assert table.sectors == ("tech", "", "energy")

    def test_near_duplicate_assets_land_close_after_fit(self):
        # two assets driven by the same latent signal plus a third
        # independent one; the fitted stationary embedding keeps the twins
        # closer to each other than to the outsider
        rng = np.random.default_rng(12)
        d = 220
        common = rng.normal(scale=0.02, size=d)
        other = rng.normal(scale=0.02, size=d)
        values = np.vstack(
            [
                common + rng.normal(scale=0.002, size=d),
                common + rng.normal(scale=0.002, size=d),
                other + rng.normal(scale=0.002, size=d),
                0.7 * other + rng.normal(scale=0.002, size=d),
            ]
        )
        rm = make_matrix(values)
        cfg = FitConfig(iterations=400, restarts=2, mc_samples=3, final_elbo_samples=30, seed=5)
        result = fit(rm, KernelSpec("se"), 2, cfg)
        emb = export_embedding(result).coordinates
        twin_dist = np.linalg.norm(emb[0] - emb[1])
        cross_dist = min(np.linalg.norm(emb[0] - emb[2]), np.linalg.norm(emb[1] - emb[2]))
        assert twin_dist < cross_dist
