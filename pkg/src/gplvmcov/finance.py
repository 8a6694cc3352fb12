"""Minimum-variance portfolios, baseline covariance estimators and backtests.

The minimal-risk weights solve

    min_w  w^T K w   subject to   sum(w) = 1,  0 <= w_i <= cap

by projected gradient descent with step 1/L on the gradient K w of the
half-quadratic objective, where L is the Gershgorin row-sum bound on the
largest eigenvalue of K.  Euclidean projection onto the capped simplex runs
by bisection on the shift tau in w_i = clamp(v_i - tau, 0, cap).  The paper
constraints are strict inequalities; closed bounds are used because an open
feasible set attains no minimum.

The inner loops are JIT-compiled; results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from numba import njit

from .data import ReturnMatrix
from .errors import ValidationError
from .kernels import KERNEL_KINDS, CovarianceEstimate, KernelSpec, assemble_covariance
from .model import PriorConfig
from .vi import FitConfig, fit

BASELINE_TAGS = ("sample", "ledoit", "equal")
ESTIMATOR_TAGS = KERNEL_KINDS + BASELINE_TAGS

_SUM_TOL = 1e-12
_MOVE_TOL = 1e-10
_MAX_ITER = 200_000


@njit(cache=True)
def _project_core(v: np.ndarray, cap: float) -> np.ndarray:  # pragma: no cover - jitted
    n = v.shape[0]
    lo = v[0]
    hi = v[0]
    for i in range(n):
        if v[i] < lo:
            lo = v[i]
        if v[i] > hi:
            hi = v[i]
    lo -= cap
    out = np.empty(n)
    tau = lo
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        s = 0.0
        for i in range(n):
            w = v[i] - tau
            if w < 0.0:
                w = 0.0
            elif w > cap:
                w = cap
            out[i] = w
            s += w
        if abs(s - 1.0) <= _SUM_TOL:
            return out
        if s > 1.0:
            lo = tau
        else:
            hi = tau
    return out


@njit(cache=True)
def _pgd_min_variance(K: np.ndarray, cap: float) -> np.ndarray:  # pragma: no cover - jitted
    n = K.shape[0]
    lipschitz = 0.0
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += abs(K[i, j])
        if s > lipschitz:
            lipschitz = s
    w = np.full(n, 1.0 / n)
    if lipschitz <= 0.0:
        return w
    step = 1.0 / lipschitz
    v = np.empty(n)
    for _ in range(_MAX_ITER):
        for i in range(n):
            g = 0.0
            for j in range(n):
                g += K[i, j] * w[j]
            v[i] = w[i] - step * g
        nxt = _project_core(v, cap)
        move = 0.0
        for i in range(n):
            d = abs(nxt[i] - w[i])
            if d > move:
                move = d
            w[i] = nxt[i]
        if move < _MOVE_TOL:
            break
    return w


@dataclass(frozen=True)
class PortfolioWeights:
    """Long-only weights on the capped simplex."""

    tickers: tuple[str, ...]
    weights: np.ndarray
    cap: float | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        if w.ndim != 1 or w.shape[0] != len(self.tickers):
            raise ValueError("weights must be one per ticker")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if abs(float(w.sum()) - 1.0) > 1e-8:
            raise ValueError(f"weights sum to {w.sum():.12f}, not 1")
        if np.any(w < -1e-8):
            raise ValueError("weights must be nonnegative")
        if self.cap is not None and np.any(w > self.cap + 1e-8):
            raise ValueError(f"weights exceed cap {self.cap}")


@dataclass(frozen=True)
class PerfStats:
    """Annualized performance; ``sharpe`` is None when volatility is zero."""

    annualized_mean: float
    annualized_std: float
    sharpe: float | None


def _default_tickers(n: int) -> tuple[str, ...]:
    return tuple(f"A{i:03d}" for i in range(n))


def project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto {w : sum w = 1, 0 <= w <= cap}."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("v must be a vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("v must be finite")
    if cap * v.shape[0] < 1.0:
        raise ValidationError(f"cap {cap} with {v.shape[0]} assets cannot reach full investment")
    return _project_core(v, float(cap))


def min_variance_weights(
    cov: CovarianceEstimate, cap: float, tickers: Sequence[str] | None = None
) -> PortfolioWeights:
    """Minimal-variance weights over the capped simplex for covariance ``cov``."""
    k = cov.matrix
    n = k.shape[0]
    if not np.allclose(k, k.T, rtol=1e-10, atol=1e-10 * max(np.max(np.abs(k)), 1.0)):
        raise ValueError("covariance must be symmetric")
    if cap * n < 1.0:
        raise ValidationError(f"cap {cap} with {n} assets cannot reach full investment")
    w = _pgd_min_variance(np.ascontiguousarray(k, dtype=float), float(cap))
    if tickers is None:
        tickers = cov.tickers if cov.tickers is not None else _default_tickers(n)
    return PortfolioWeights(tickers=tuple(tickers), weights=w, cap=float(cap))


def equal_weights(n: int, tickers: Sequence[str] | None = None) -> PortfolioWeights:
    """Uniform 1/N baseline; deliberately ignores the weight cap."""
    if n < 1:
        raise ValidationError("need at least one asset")
    if tickers is None:
        tickers = _default_tickers(n)
    return PortfolioWeights(tickers=tuple(tickers), weights=np.full(n, 1.0 / n), cap=None)


def sample_covariance(returns: ReturnMatrix) -> CovarianceEstimate:
    """1/D-normalized sample covariance with per-asset mean removed."""
    if returns.n_days < 2:
        raise ValidationError("need at least two days for a sample covariance")
    centered = returns.values - returns.values.mean(axis=1, keepdims=True)
    k = centered @ centered.T / returns.n_days
    k = 0.5 * (k + k.T)
    return CovarianceEstimate(matrix=k, estimator_tag="sample", tickers=returns.tickers)


def ledoit_wolf_intensity(returns: ReturnMatrix) -> float:
    """Optimal shrinkage intensity toward the scaled identity, clipped to [0, 1]."""
    if returns.n_days < 2:
        raise ValidationError("need at least two days for shrinkage estimation")
    n, d = returns.values.shape
    centered = returns.values - returns.values.mean(axis=1, keepdims=True)
    s = centered @ centered.T / d
    mu = np.trace(s) / n
    dist2 = float(np.sum((s - mu * np.eye(n)) ** 2)) / n
    if dist2 <= 0.0:
        return 0.0
    norms4 = np.sum(centered**2, axis=0) ** 2  # ||x_d||^4 per day
    b_bar2 = (float(np.sum(norms4)) - d * float(np.sum(s * s))) / (d**2 * n)
    return float(np.clip(min(b_bar2, dist2) / dist2, 0.0, 1.0))


def ledoit_wolf(returns: ReturnMatrix) -> CovarianceEstimate:
    """Sample covariance shrunk toward mu*I with the optimal intensity."""
    intensity = ledoit_wolf_intensity(returns)
    sample = sample_covariance(returns)
    n = sample.n_assets
    mu = np.trace(sample.matrix) / n
    k = (1.0 - intensity) * sample.matrix + intensity * mu * np.eye(n)
    return CovarianceEstimate(matrix=k, estimator_tag="ledoit", tickers=returns.tickers)


def sharpe_ratio(period_returns: np.ndarray, annualization_days: int = 252) -> PerfStats:
    """Annualized mean, population std and Sharpe ratio of a daily return series."""
    series = np.asarray(period_returns, dtype=float)
    if series.ndim != 1 or series.shape[0] < 2:
        raise ValidationError("need a series of at least two returns")
    mean = float(series.mean()) * annualization_days
    if np.all(series == series[0]):  # exactly constant: zero volatility, Sharpe undefined
        return PerfStats(annualized_mean=mean, annualized_std=0.0, sharpe=None)
    std = float(series.std(ddof=0)) * np.sqrt(annualization_days)
    sharpe = mean / std if std > 0.0 else None
    return PerfStats(annualized_mean=mean, annualized_std=std, sharpe=sharpe)


@dataclass(frozen=True)
class BacktestConfig:
    estimators: tuple[str, ...] = ("linear", "se", "sample", "ledoit", "equal")
    train_days: int = 252
    hold_days: int = 126
    weight_cap: float = 0.1
    latent_dim: int = 3
    annualization_days: int = 252

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.train_days < 2:
            raise ValidationError("train_days must be >= 2")
        if self.hold_days < 1:
            raise ValidationError("hold_days must be >= 1")
        if not 0.0 < self.weight_cap <= 1.0:
            raise ValidationError("weight_cap must be in (0, 1]")
        unknown = [t for t in self.estimators if t not in ESTIMATOR_TAGS]
        if unknown:
            raise ValidationError(
                f"unknown estimators {unknown}; expected a subset of {ESTIMATOR_TAGS}"
            )
        if not self.estimators:
            raise ValidationError("need at least one estimator")


@dataclass(frozen=True)
class PeriodInfo:
    index: int
    train_start: int  # day indexes into the full return matrix
    train_stop: int
    hold_stop: int


@dataclass(frozen=True)
class EstimatorPerformance:
    tag: str
    stats: PerfStats
    daily_returns: np.ndarray
    period_weights: tuple[PortfolioWeights, ...]


@dataclass(frozen=True)
class BacktestReport:
    estimators: tuple[EstimatorPerformance, ...]
    periods: tuple[PeriodInfo, ...]
    config: BacktestConfig

    def table_rows(self) -> list[dict]:
        """One row per estimator with the headline columns."""
        rows = []
        for perf in self.estimators:
            rows.append(
                {
                    "Model": perf.tag,
                    "Mean": perf.stats.annualized_mean,
                    "Std": perf.stats.annualized_std,
                    "Sharpe ratio": perf.stats.sharpe,
                }
            )
        return rows

    def to_dict(self) -> dict:
        return {
            "config": {
                "estimators": list(self.config.estimators),
                "train_days": self.config.train_days,
                "hold_days": self.config.hold_days,
                "weight_cap": self.config.weight_cap,
                "latent_dim": self.config.latent_dim,
                "annualization_days": self.config.annualization_days,
            },
            "periods": [
                {
                    "index": p.index,
                    "train_start": p.train_start,
                    "train_stop": p.train_stop,
                    "hold_stop": p.hold_stop,
                }
                for p in self.periods
            ],
            "estimators": [
                {
                    "tag": perf.tag,
                    "annualized_mean": perf.stats.annualized_mean,
                    "annualized_std": perf.stats.annualized_std,
                    "sharpe": perf.stats.sharpe,
                    "daily_returns": perf.daily_returns.tolist(),
                    "period_weights": [pw.weights.tolist() for pw in perf.period_weights],
                }
                for perf in self.estimators
            ],
        }


def _estimate_covariance(
    tag: str,
    train: ReturnMatrix,
    cfg: BacktestConfig,
    fit_cfg: FitConfig,
    prior: PriorConfig,
    workers: int,
) -> CovarianceEstimate:
    if tag == "sample":
        return sample_covariance(train)
    if tag == "ledoit":
        return ledoit_wolf(train)
    spec = KernelSpec(kind=tag)
    result = fit(train, spec, cfg.latent_dim, fit_cfg, prior, workers=workers)
    cov = assemble_covariance(
        spec, result.point_params.latents, result.point_params.hyper, tag=tag
    )
    return replace(cov, tickers=train.tickers)


def backtest(
    returns: ReturnMatrix,
    cfg: BacktestConfig,
    fit_cfg: FitConfig,
    prior: PriorConfig = PriorConfig(),
    workers: int = 1,
) -> BacktestReport:
    """Rolling estimate-then-hold evaluation of minimum-variance portfolios.

    Each period estimates covariances on the trailing ``train_days`` only
    (no lookahead), holds the resulting weights fixed for ``hold_days``, and
    records daily portfolio returns.  Annualized statistics pool all holding
    days per estimator.
    """
    needed = cfg.train_days + cfg.hold_days
    if returns.n_days < needed:
        raise ValidationError(
            f"backtest needs at least {needed} days (train {cfg.train_days} + hold {cfg.hold_days}); "
            f"got {returns.n_days}"
        )
    if cfg.weight_cap * returns.n_assets < 1.0:
        raise ValidationError("weight_cap times number of assets must be at least 1")
    n_periods = (returns.n_days - cfg.train_days) // cfg.hold_days

    periods = []
    daily = {tag: [] for tag in cfg.estimators}
    weights_by_tag = {tag: [] for tag in cfg.estimators}
    for p in range(n_periods):
        train_start = p * cfg.hold_days
        train_stop = train_start + cfg.train_days
        hold_stop = train_stop + cfg.hold_days
        periods.append(PeriodInfo(p, train_start, train_stop, hold_stop))
        train = returns.window(train_start, train_stop)
        hold_values = returns.values[:, train_stop:hold_stop]
        for e_idx, tag in enumerate(cfg.estimators):
            if tag == "equal":
                pw = equal_weights(returns.n_assets, returns.tickers)
            else:
                seed = int(
                    np.random.SeedSequence(
                        entropy=fit_cfg.seed, spawn_key=(p, e_idx)
                    ).generate_state(1)[0]
                )
                cov = _estimate_covariance(
                    tag, train, cfg, replace(fit_cfg, seed=seed), prior, workers
                )
                pw = min_variance_weights(cov, cfg.weight_cap)
            weights_by_tag[tag].append(pw)
            daily[tag].append(pw.weights @ hold_values)

    performances = []
    for tag in cfg.estimators:
        series = np.concatenate(daily[tag])
        performances.append(
            EstimatorPerformance(
                tag=tag,
                stats=sharpe_ratio(series, cfg.annualization_days),
                daily_returns=series,
                period_weights=tuple(weights_by_tag[tag]),
            )
        )
    return BacktestReport(
        estimators=tuple(performances), periods=tuple(periods), config=cfg
    )
