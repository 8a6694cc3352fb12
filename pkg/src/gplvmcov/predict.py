"""Conditional prediction, leave-one-out imputation and embedding export.

Given a fitted covariance over assets, any day's missing returns can be
predicted from the observed ones through the Gaussian conditional

    mean = K_to K_oo^{-1} y_o
    cov  = K_tt - K_to K_oo^{-1} K_ot

with blocks read from the single asset-by-asset covariance; latent positions
are never re-inferred on test data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .data import ReturnMatrix
from .errors import ValidationError
from .kernels import CovarianceEstimate, assemble_covariance, safe_cholesky, signal_covariance
from .vi import FitResult


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mean, dtype=float)
        c = np.asarray(self.covariance, dtype=float)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)
        if c.shape != (m.shape[0], m.shape[0]):
            raise ValueError("covariance shape must match the mean length")


@dataclass(frozen=True)
class ImputationReport:
    """Per-cell predictions plus pooled and per-asset diagnostics.

    ``predicted`` holds the conditional means, ``baseline`` the per-asset
    historical-mean predictions; all aggregate numbers are recomputable from
    the per-cell arrays.
    """

    tickers: tuple[str, ...]
    dates: tuple
    actual: np.ndarray
    predicted: np.ndarray
    baseline: np.ndarray
    r2: float
    mean_abs_deviation: float
    baseline_r2: float
    baseline_mean_abs_deviation: float
    per_asset_r2: np.ndarray


def gp_conditional(
    cov: CovarianceEstimate,
    observed_idx: Sequence[int],
    observed_values: np.ndarray,
    target_idx: Sequence[int],
) -> PredictiveDistribution:
    """Conditional distribution of target assets given observed ones."""
    obs = np.asarray(observed_idx, dtype=int)
    tgt = np.asarray(target_idx, dtype=int)
    if np.intersect1d(obs, tgt).size:
        raise ValueError("observed and target index sets must be disjoint")
    k = cov.matrix
    n = k.shape[0]
    if obs.size and (obs.min() < 0 or obs.max() >= n):
        raise ValueError("observed indexes out of range")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
        raise ValueError("target indexes out of range")
    y = np.asarray(observed_values, dtype=float)
    if y.shape[0] != obs.size:
        raise ValueError("observed_values must match observed_idx in length")

    k_oo = k[np.ix_(obs, obs)]
    k_to = k[np.ix_(tgt, obs)]
    k_tt = k[np.ix_(tgt, tgt)]
    lower, _ = safe_cholesky(k_oo)
    solve_y = cho_solve((lower, True), y, check_finite=False)
    solve_cross = cho_solve((lower, True), k_to.T, check_finite=False)
    mean = k_to @ solve_y
    cond = k_tt - k_to @ solve_cross
    cond = 0.5 * (cond + cond.T)
    return PredictiveDistribution(mean=mean, covariance=cond)


def r2_score(actual: np.ndarray, predicted: np.ndarray) -> float:
    """1 - sum((y - f)^2) / sum((y - mean(y))^2), over flattened inputs."""
    y = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(predicted, dtype=float).ravel()
    if y.shape != f.shape:
        raise ValueError("actual and predicted must have the same shape")
    if y.size < 2:
        raise ValidationError("need at least two values for an R^2 score")
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom == 0.0:
        raise ValidationError("R^2 undefined: actual values are constant")
    return 1.0 - float(np.sum((y - f) ** 2)) / denom


def mean_abs_dev(actual: np.ndarray, predicted: np.ndarray) -> float:
    """Average absolute elementwise deviation between two equally shaped arrays."""
    y = np.asarray(actual, dtype=float)
    f = np.asarray(predicted, dtype=float)
    if y.shape != f.shape:
        raise ValueError("actual and predicted must have the same shape")
    return float(np.mean(np.abs(y - f)))


def loocv_impute(
    r_test: ReturnMatrix,
    cov: CovarianceEstimate,
    baseline_means: np.ndarray | None = None,
) -> ImputationReport:
    """Leave-one-asset-out imputation of every cell of ``r_test``.

    Each asset's return on each day is predicted from the same day's returns
    of the other assets via :func:`gp_conditional`; one factorization per
    left-out asset covers all days.  ``baseline_means`` are the per-asset
    historical (training-period) means used by the comparison baseline; they
    default to zero, matching the model's zero-mean assumption.
    """
    n = r_test.n_assets
    if cov.n_assets != n:
        raise ValidationError(
            f"covariance covers {cov.n_assets} assets but test data has {n}"
        )
    if cov.tickers is not None and tuple(cov.tickers) != tuple(r_test.tickers):
        mismatched = [t for t in r_test.tickers if t not in cov.tickers]
        raise ValidationError(f"ticker mismatch between covariance and test data: {mismatched}")
    if baseline_means is None:
        baseline_means = np.zeros(n)
    baseline_means = np.asarray(baseline_means, dtype=float)
    if baseline_means.shape != (n,):
        raise ValidationError("baseline_means must hold one value per asset")

    actual = r_test.values
    predicted = np.empty_like(actual)
    all_idx = np.arange(n)
    for held_out in range(n):
        others = np.delete(all_idx, held_out)
        dist = gp_conditional(cov, others, actual[others, :], [held_out])
        predicted[held_out, :] = dist.mean[0]

    baseline = np.repeat(baseline_means[:, None], r_test.n_days, axis=1)
    per_asset = np.full(n, np.nan)
    for i in range(n):
        denom = float(np.sum((actual[i] - actual[i].mean()) ** 2))
        if denom > 0.0:
            per_asset[i] = 1.0 - float(np.sum((actual[i] - predicted[i]) ** 2)) / denom
    return ImputationReport(
        tickers=r_test.tickers,
        dates=r_test.dates,
        actual=actual,
        predicted=predicted,
        baseline=baseline,
        r2=r2_score(actual, predicted),
        mean_abs_deviation=mean_abs_dev(actual, predicted),
        baseline_r2=r2_score(actual, baseline),
        baseline_mean_abs_deviation=mean_abs_dev(actual, baseline),
        per_asset_r2=per_asset,
    )


def reconstruction_r2(returns: ReturnMatrix | np.ndarray, result: FitResult) -> float:
    """In-sample R^2 of the noise-free conditional mean reconstruction.

    The reconstruction maps each day's cross-section through
    K_signal K^{-1} r, i.e. the posterior-mean signal given the observed
    day under the fitted covariance; pooled over all cells with the global
    mean as the reference.
    """
    values = returns.values if isinstance(returns, ReturnMatrix) else np.asarray(returns, float)
    params = result.point_params
    cov = assemble_covariance(result.kernel, params.latents, params.hyper)
    k_signal = signal_covariance(result.kernel, params.latents, params.hyper)
    lower, _ = safe_cholesky(cov.matrix)
    reconstructed = k_signal @ cho_solve((lower, True), values, check_finite=False)
    return r2_score(values, reconstructed)


@dataclass(frozen=True)
class EmbeddingTable:
    """Posterior-mean latent coordinates, one row per ticker."""

    tickers: tuple[str, ...]
    coordinates: np.ndarray  # (N, Q)
    sectors: tuple[str, ...] | None = None


def export_embedding(
    result: FitResult, sectors: Mapping[str, str] | None = None
) -> EmbeddingTable:
    """Latent embedding of the fitted assets, with optional sector passthrough."""
    coords = result.point_params.latents
    tickers = result.tickers
    if tickers is None:
        tickers = tuple(f"A{i:03d}" for i in range(coords.shape[0]))
    sector_col = None
    if sectors is not None:
        sector_col = tuple(str(sectors.get(t, "")) for t in tickers)
    return EmbeddingTable(tickers=tuple(tickers), coordinates=coords, sectors=sector_col)
