"""Mean-field Gaussian variational inference over unconstrained parameters.

The posterior over latent coordinates and (log-transformed) positive kernel
parameters is approximated by independent Gaussians.  The evidence lower
bound is estimated by Monte Carlo with reparameterized draws and maximized
by stochastic gradient ascent with adaptive moments; the whole procedure is
restarted from random initializations and the restart with the highest
final ELBO wins.

Everything is deterministic given the seed: each restart owns an independent
generator derived from ``(seed, restart_index)``, so results are identical
whether restarts run serially or on a thread pool.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import ReturnMatrix
from .errors import FitError, NumericalError
from .kernels import HyperParams, KernelSpec
from .model import ModelParams, PriorConfig, log_joint, log_joint_and_gradient

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VariationalPosterior:
    """Independent Gaussians over every unconstrained coordinate."""

    means: np.ndarray
    log_stddevs: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.means, dtype=float)
        s = np.asarray(self.log_stddevs, dtype=float)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "log_stddevs", s)
        if m.shape != s.shape or m.ndim != 1:
            raise ValueError("means and log_stddevs must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise ValueError("variational parameters must be finite")

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    def entropy(self) -> float:
        """Differential entropy of the independent-Gaussian family."""
        return float(np.sum(self.log_stddevs)) + 0.5 * self.dim * (1.0 + _LOG_2PI)


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 3000
    step_size: float = 0.05
    mc_samples: int = 3
    restarts: int = 50
    final_elbo_samples: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("iterations", "mc_samples", "restarts", "final_elbo_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.step_size > 0.0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class FitResult:
    """Fitted posterior plus provenance needed to reuse it downstream."""

    posterior: VariationalPosterior
    elbo_trace: np.ndarray
    final_elbo: float
    final_elbo_stderr: float
    point_params: ModelParams
    restart_index: int
    restart_elbos: tuple[float, ...]
    kernel: KernelSpec
    latent_dim: int
    tickers: tuple[str, ...] | None = None
    train_means: np.ndarray | None = None


@dataclass(frozen=True)
class ElboEstimate:
    """Monte-Carlo ELBO: value = mean(per_sample) + analytic entropy."""

    value: float
    per_sample: np.ndarray  # log joint + Jacobian correction, one entry per draw
    stderr: float


@dataclass(frozen=True)
class UnconstrainedTarget:
    """A log density (plus transform Jacobian) over an unconstrained vector."""

    dim: int
    value: Callable[[np.ndarray], float]
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]


class ParameterLayout:
    """Flattening of model parameters into one unconstrained vector.

    Order: latent coordinates (row-major), the kernel scalar (lengthscale for
    stationary kernels, kernel variance for the linear one), per-asset scale,
    per-asset noise.  Latents map through the identity; every positive
    parameter maps through its natural logarithm, so the log Jacobian of the
    inverse transform is the sum of the positive-block coordinates.
    """

    def __init__(self, spec: KernelSpec, n_assets: int, latent_dim: int) -> None:
        self.spec = spec
        self.n_assets = n_assets
        self.latent_dim = latent_dim
        self.n_latent = n_assets * latent_dim
        self.dim = self.n_latent + 1 + 2 * n_assets

    def to_unconstrained(self, params: ModelParams) -> np.ndarray:
        h = params.hyper
        scalar = h.kernel_variance if self.spec.kind == "linear" else h.lengthscale
        if scalar is None:
            raise ValueError("params are missing the kernel scalar for this kernel kind")
        vec = np.concatenate(
            [params.latents.ravel(), [scalar], h.scale, h.noise]
        )
        vec[self.n_latent:] = np.log(vec[self.n_latent:])
        return vec

    def from_unconstrained(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("unconstrained vector must be finite")
        n = self.n_assets
        latents = vec[: self.n_latent].reshape(n, self.latent_dim)
        positive = np.exp(vec[self.n_latent :])
        scalar = float(positive[0])
        scale = positive[1 : 1 + n]
        noise = positive[1 + n :]
        if self.spec.kind == "linear":
            hyper = HyperParams(scale=scale, noise=noise, kernel_variance=scalar)
        else:
            hyper = HyperParams(scale=scale, noise=noise, lengthscale=scalar)
        return ModelParams(latents=latents, hyper=hyper)

    def log_jacobian(self, vec: np.ndarray) -> float:
        """log |d constrained / d unconstrained| of the inverse transform."""
        return float(np.sum(vec[self.n_latent :]))


def build_target(
    returns: ReturnMatrix | np.ndarray,
    spec: KernelSpec,
    latent_dim: int,
    prior: PriorConfig,
) -> tuple[UnconstrainedTarget, ParameterLayout]:
    """Log joint of the covariance model as an unconstrained-space target."""
    values = returns.values if isinstance(returns, ReturnMatrix) else np.asarray(returns, float)
    n_assets = values.shape[0]
    layout = ParameterLayout(spec, n_assets, latent_dim)

    def value_and_grad(vec: np.ndarray) -> tuple[float, np.ndarray]:
        params = layout.from_unconstrained(vec)
        joint, grad = log_joint_and_gradient(values, params, spec, prior)
        flat = grad.flatten()
        positive = np.exp(vec[layout.n_latent :])
        # chain rule through x = exp(zeta), plus d/dzeta of the log-Jacobian term
        flat[layout.n_latent :] = flat[layout.n_latent :] * positive + 1.0
        return joint + layout.log_jacobian(vec), flat

    def value(vec: np.ndarray) -> float:
        params = layout.from_unconstrained(vec)
        return log_joint(values, params, spec, prior) + layout.log_jacobian(vec)

    return UnconstrainedTarget(dim=layout.dim, value=value, value_and_grad=value_and_grad), layout


def elbo_estimate(
    q: VariationalPosterior,
    target: UnconstrainedTarget,
    n_samples: int,
    rng: np.random.Generator,
) -> ElboEstimate:
    """Monte-Carlo ELBO estimate with reparameterized draws.

    Deterministic for a fixed generator state.  A draw that fails to
    factorize at maximum jitter aborts the whole estimate.
    """
    if q.dim != target.dim:
        raise ValueError(f"posterior dimension {q.dim} != target dimension {target.dim}")
    stddevs = np.exp(q.log_stddevs)
    eps = rng.standard_normal((n_samples, q.dim))
    per_sample = np.empty(n_samples)
    for i in range(n_samples):
        draw = q.means + stddevs * eps[i]
        try:
            per_sample[i] = target.value(draw)
        except NumericalError as exc:
            raise NumericalError(f"ELBO draw {i + 1}/{n_samples} failed: {exc}") from exc
    value = float(np.mean(per_sample)) + q.entropy()
    stderr = float(np.std(per_sample, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    return ElboEstimate(value=value, per_sample=per_sample, stderr=stderr)


def elbo_with_gradient(
    q: VariationalPosterior,
    target: UnconstrainedTarget,
    epsilons: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """ELBO and its gradient in (means, log_stddevs) for fixed base draws.

    With common random numbers this function is deterministic and smooth in
    the variational parameters, so its gradient can be checked against finite
    differences of itself.
    """
    stddevs = np.exp(q.log_stddevs)
    n_samples = epsilons.shape[0]
    grad_means = np.zeros(q.dim)
    grad_scaled = np.zeros(q.dim)
    total = 0.0
    for i in range(n_samples):
        draw = q.means + stddevs * epsilons[i]
        val, grad = target.value_and_grad(draw)
        total += val
        grad_means += grad
        grad_scaled += grad * epsilons[i]
    inv = 1.0 / n_samples
    value = total * inv + q.entropy()
    grad_means *= inv
    grad_log_stddevs = grad_scaled * inv * stddevs + 1.0  # +1 from the entropy term
    return value, grad_means, grad_log_stddevs


class _Adam:
    """Adaptive-moment ascent over a flat parameter vector."""

    def __init__(self, dim: int, step_size: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def ascend(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta + self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class _RestartOutcome:
    q: VariationalPosterior | None
    trace: np.ndarray | None
    final_elbo: float
    final_stderr: float
    error: str | None


def _initial_posterior(
    layout: ParameterLayout, values: np.ndarray, rng: np.random.Generator
) -> VariationalPosterior:
    n = layout.n_assets
    row_std = np.maximum(np.std(values, axis=1), 1e-8)
    means = np.empty(layout.dim)
    means[: layout.n_latent] = rng.standard_normal(layout.n_latent)
    means[layout.n_latent] = 0.0  # scalar starts at 1
    means[layout.n_latent + 1 : layout.n_latent + 1 + n] = np.log(row_std)
    means[layout.n_latent + 1 + n :] = np.log(0.5 * row_std)
    log_stddevs = np.full(layout.dim, math.log(0.1))
    return VariationalPosterior(means=means, log_stddevs=log_stddevs)


def _run_restart(
    target: UnconstrainedTarget,
    layout: ParameterLayout,
    values: np.ndarray,
    cfg: FitConfig,
    restart_index: int,
) -> _RestartOutcome:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(restart_index,))
    )
    q = _initial_posterior(layout, values, rng)
    theta = np.concatenate([q.means, q.log_stddevs])
    adam = _Adam(theta.size, cfg.step_size)
    trace = np.empty(cfg.iterations)
    try:
        for it in range(cfg.iterations):
            eps = rng.standard_normal((cfg.mc_samples, layout.dim))
            value, g_mean, g_logsd = elbo_with_gradient(q, target, eps)
            trace[it] = value
            theta = adam.ascend(theta, np.concatenate([g_mean, g_logsd]))
            q = VariationalPosterior(theta[: layout.dim], theta[layout.dim :])
        final = elbo_estimate(q, target, cfg.final_elbo_samples, rng)
    except (NumericalError, ValueError) as exc:
        return _RestartOutcome(None, None, -math.inf, math.inf, f"{type(exc).__name__}: {exc}")
    return _RestartOutcome(q, trace, final.value, final.stderr, None)


def fit(
    returns: ReturnMatrix | np.ndarray,
    spec: KernelSpec,
    latent_dim: int,
    cfg: FitConfig,
    prior: PriorConfig = PriorConfig(),
    workers: int = 1,
) -> FitResult:
    """Maximize the ELBO with random restarts; return the best restart's fit."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    values = returns.values if isinstance(returns, ReturnMatrix) else np.asarray(returns, float)
    tickers = returns.tickers if isinstance(returns, ReturnMatrix) else None
    target, layout = build_target(values, spec, latent_dim, prior)

    indices = range(cfg.restarts)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(lambda i: _run_restart(target, layout, values, cfg, i), indices)
            )
    else:
        outcomes = [_run_restart(target, layout, values, cfg, i) for i in indices]

    finals = np.array([o.final_elbo for o in outcomes])
    if not np.any(np.isfinite(finals)):
        details = "; ".join(f"restart {i}: {o.error}" for i, o in enumerate(outcomes))
        raise FitError(f"all {cfg.restarts} restarts failed numerically ({details})")
    best = int(np.argmax(finals))
    winner = outcomes[best]
    return FitResult(
        posterior=winner.q,
        elbo_trace=winner.trace,
        final_elbo=winner.final_elbo,
        final_elbo_stderr=winner.final_stderr,
        point_params=layout.from_unconstrained(winner.q.means),
        restart_index=best,
        restart_elbos=tuple(finals.tolist()),
        kernel=spec,
        latent_dim=latent_dim,
        tickers=tickers,
        train_means=values.mean(axis=1),
    )


@dataclass(frozen=True)
class LatentDimEntry:
    latent_dim: int
    elbo: float
    stderr: float
    fit: FitResult | None
    error: str | None = None


@dataclass(frozen=True)
class LatentDimSelection:
    table: tuple[LatentDimEntry, ...]
    best_latent_dim: int


def select_latent_dim(
    returns: ReturnMatrix | np.ndarray,
    spec: KernelSpec,
    q_range: Sequence[int],
    cfg: FitConfig,
    prior: PriorConfig = PriorConfig(),
    workers: int = 1,
) -> LatentDimSelection:
    """Fit every latent dimension in ``q_range`` and pick the highest ELBO.

    Ties break toward the smallest dimension.  Per-dimension failures are
    retained in the table; only a fully failed sweep raises.
    """
    if len(q_range) == 0:
        raise ValueError("q_range must be nonempty")
    entries = []
    for q_dim in sorted(q_range):
        try:
            result = fit(returns, spec, q_dim, cfg, prior, workers)
            entries.append(
                LatentDimEntry(q_dim, result.final_elbo, result.final_elbo_stderr, result)
            )
        except FitError as exc:
            entries.append(LatentDimEntry(q_dim, -math.inf, math.inf, None, error=str(exc)))
    if all(e.fit is None for e in entries):
        raise FitError("no latent dimension produced a successful fit")
    best = entries[0]
    for entry in entries[1:]:
        if entry.elbo > best.elbo:
            best = entry
    return LatentDimSelection(table=tuple(entries), best_latent_dim=best.latent_dim)


def fit_result_to_dict(result: FitResult) -> dict:
    """JSON-ready representation of a fit."""
    return {
        "kernel": {"kind": result.kernel.kind, "standard_exponent": result.kernel.standard_exponent},
        "latent_dim": result.latent_dim,
        "tickers": None if result.tickers is None else list(result.tickers),
        "train_means": None if result.train_means is None else result.train_means.tolist(),
        "posterior": {
            "means": result.posterior.means.tolist(),
            "log_stddevs": result.posterior.log_stddevs.tolist(),
        },
        "elbo_trace": result.elbo_trace.tolist(),
        "final_elbo": result.final_elbo,
        "final_elbo_stderr": result.final_elbo_stderr,
        "restart_index": result.restart_index,
        # failed restarts carry -inf, which strict JSON cannot hold
        "restart_elbos": [x if math.isfinite(x) else None for x in result.restart_elbos],
    }


def fit_result_from_dict(doc: dict) -> FitResult:
    """Inverse of :func:`fit_result_to_dict`."""
    spec = KernelSpec(
        kind=doc["kernel"]["kind"], standard_exponent=doc["kernel"]["standard_exponent"]
    )
    tickers = doc.get("tickers")
    means = np.asarray(doc["posterior"]["means"], dtype=float)
    log_stddevs = np.asarray(doc["posterior"]["log_stddevs"], dtype=float)
    q = VariationalPosterior(means=means, log_stddevs=log_stddevs)
    latent_dim = int(doc["latent_dim"])
    n_assets = (means.shape[0] - 1) // (latent_dim + 2)
    layout = ParameterLayout(spec, n_assets, latent_dim)
    train_means = doc.get("train_means")
    return FitResult(
        posterior=q,
        elbo_trace=np.asarray(doc["elbo_trace"], dtype=float),
        final_elbo=float(doc["final_elbo"]),
        final_elbo_stderr=float(doc["final_elbo_stderr"]),
        point_params=layout.from_unconstrained(means),
        restart_index=int(doc["restart_index"]),
        restart_elbos=tuple(-math.inf if x is None else float(x) for x in doc["restart_elbos"]),
        kernel=spec,
        latent_dim=latent_dim,
        tickers=None if tickers is None else tuple(tickers),
        train_means=None if train_means is None else np.asarray(train_means, dtype=float),
    )
