"""Log marginal likelihood, log prior and log joint with analytic gradients.

Each day's cross-section of returns is modelled as an independent zero-mean
Gaussian with the kernel-built covariance K, so for an N x D return matrix r

    log p(r | K) = -(N D / 2) log 2pi - (D / 2) log|K| - (1/2) tr(K^{-1} r r^T).

The trace term is evaluated through triangular solves against the N x D data
(one factorization of K, never forming r r^T), which costs O(N^2 D) and keeps
the D-column reduction in a fixed summation order for determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from .data import ReturnMatrix
from .kernels import (
    CovarianceEstimate,
    HyperParams,
    KernelSpec,
    _stationary_grad_dist,
    _stationary_grad_lengthscale,
    _stationary_value,
    assemble_covariance,
    pairwise_distances,
    safe_cholesky,
)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelParams:
    """Latent coordinates plus kernel hyperparameters."""

    latents: np.ndarray  # (N, Q)
    hyper: HyperParams

    def __post_init__(self) -> None:
        b = np.asarray(self.latents, dtype=float)
        object.__setattr__(self, "latents", b)
        if b.ndim != 2:
            raise ValueError("latents must be an N x Q matrix")
        if b.shape[0] != self.hyper.n_assets:
            raise ValueError("latents and hyperparameters disagree on N")
        if not np.all(np.isfinite(b)):
            raise ValueError("latents must be finite")

    @property
    def n_assets(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]


@dataclass(frozen=True)
class ModelGradient:
    """Gradient of the log joint, mirroring :class:`ModelParams`."""

    latents: np.ndarray
    scale: np.ndarray
    noise: np.ndarray
    lengthscale: float | None = None
    kernel_variance: float | None = None

    def flatten(self) -> np.ndarray:
        """Coordinates in the canonical order: latents, scalar, scale, noise."""
        scalar = self.lengthscale if self.lengthscale is not None else self.kernel_variance
        return np.concatenate([self.latents.ravel(), [scalar], self.scale, self.noise])


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters.

    Latent coordinates get independent normals with standard deviation
    ``latent_std``; the kernel scalar (lengthscale or linear-kernel variance)
    gets an inverse gamma in shape-scale parameterization (density
    proportional to x^{-shape-1} exp(-scale / x)); the per-asset scale and
    noise vectors get half-normals with the given variance parameter,
    normalizers included.
    """

    latent_std: float = 1.0
    invgamma_shape: float = 3.0
    invgamma_scale: float = 1.0
    halfnormal_variance: float = 0.5

    def __post_init__(self) -> None:
        for name in ("latent_std", "invgamma_shape", "invgamma_scale", "halfnormal_variance"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


def _values(returns: ReturnMatrix | np.ndarray) -> np.ndarray:
    if isinstance(returns, ReturnMatrix):
        return returns.values
    return np.asarray(returns, dtype=float)


def log_marginal_likelihood(returns: ReturnMatrix | np.ndarray, cov: CovarianceEstimate) -> float:
    """Gaussian log likelihood of all D days under covariance ``cov``."""
    r = _values(returns)
    n, d = r.shape
    if cov.n_assets != n:
        raise ValueError(f"covariance is {cov.n_assets}x{cov.n_assets} but data has {n} assets")
    lower, _ = safe_cholesky(cov.matrix)
    half_solve = solve_triangular(lower, r, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(lower))))
    quad = float(np.sum(half_solve * half_solve))
    return -0.5 * n * d * _LOG_2PI - 0.5 * d * logdet - 0.5 * quad


def invgamma_logpdf(x: float, shape: float, scale: float) -> float:
    """log density of InvGamma(shape, scale) at x > 0."""
    if x <= 0.0:
        return -math.inf
    return shape * math.log(scale) - gammaln(shape) - (shape + 1.0) * math.log(x) - scale / x


def halfnormal_logpdf(x: np.ndarray | float, variance: float) -> np.ndarray | float:
    """log density of a half-normal with the given variance parameter at x > 0."""
    return 0.5 * math.log(2.0) - 0.5 * math.log(math.pi * variance) - np.square(x) / (2.0 * variance)


def log_prior(params: ModelParams, cfg: PriorConfig) -> float:
    """Sum of log prior densities over all model parameters."""
    b = params.latents
    std = cfg.latent_std
    total = float(
        -0.5 * b.size * _LOG_2PI - b.size * math.log(std) - 0.5 * np.sum((b / std) ** 2)
    )
    h = params.hyper
    for scalar in (h.lengthscale, h.kernel_variance):
        if scalar is not None:
            total += invgamma_logpdf(scalar, cfg.invgamma_shape, cfg.invgamma_scale)
    total += float(np.sum(halfnormal_logpdf(h.scale, cfg.halfnormal_variance)))
    total += float(np.sum(halfnormal_logpdf(h.noise, cfg.halfnormal_variance)))
    return total


def log_joint(
    returns: ReturnMatrix | np.ndarray,
    params: ModelParams,
    spec: KernelSpec,
    cfg: PriorConfig,
) -> float:
    """Unnormalized log posterior: likelihood plus prior."""
    cov = assemble_covariance(spec, params.latents, params.hyper)
    return log_marginal_likelihood(returns, cov) + log_prior(params, cfg)


def _prior_gradient(params: ModelParams, cfg: PriorConfig) -> ModelGradient:
    h = params.hyper
    d_latents = -params.latents / cfg.latent_std**2
    v = cfg.halfnormal_variance
    d_scale = -h.scale / v
    d_noise = -h.noise / v

    def d_invgamma(x: float) -> float:
        return -(cfg.invgamma_shape + 1.0) / x + cfg.invgamma_scale / x**2

    return ModelGradient(
        latents=d_latents,
        scale=d_scale,
        noise=d_noise,
        lengthscale=None if h.lengthscale is None else d_invgamma(h.lengthscale),
        kernel_variance=None if h.kernel_variance is None else d_invgamma(h.kernel_variance),
    )


def _likelihood_gradient(
    r: np.ndarray, params: ModelParams, spec: KernelSpec
) -> tuple[float, ModelGradient]:
    """Likelihood value and its gradient in all covariance parameters.

    Uses dL/dK = (1/2)(K^{-1} r r^T K^{-1} - D K^{-1}) chained through the
    kernel structure.
    """
    n, d_days = r.shape
    b = params.latents
    h = params.hyper
    cov = assemble_covariance(spec, b, h)
    lower, _ = safe_cholesky(cov.matrix)

    half_solve = solve_triangular(lower, r, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(lower))))
    value = -0.5 * n * d_days * _LOG_2PI - 0.5 * d_days * logdet - 0.5 * float(
        np.sum(half_solve * half_solve)
    )

    k_inv = cho_solve((lower, True), np.eye(n), check_finite=False)
    k_inv_r = cho_solve((lower, True), r, check_finite=False)
    grad_k = 0.5 * (k_inv_r @ k_inv_r.T - d_days * k_inv)
    grad_k = 0.5 * (grad_k + grad_k.T)

    d_noise = 2.0 * h.noise * np.diag(grad_k)
    if spec.kind == "linear":
        sigma = h.kernel_variance
        gram = b @ b.T
        d_latents = 2.0 * sigma**2 * (grad_k @ b)
        d_sigma = 2.0 * sigma * float(np.sum(grad_k * gram))
        grad = ModelGradient(
            latents=d_latents,
            scale=np.zeros(n),  # scale does not enter the linear covariance
            noise=d_noise,
            kernel_variance=d_sigma,
        )
        return value, grad

    length = h.lengthscale
    dist = pairwise_distances(b)
    corr = _stationary_value(spec.kind, dist, length, spec.standard_exponent)
    np.fill_diagonal(corr, 1.0)
    scaled_grad = np.outer(h.scale, h.scale) * grad_k  # dL/dK_corr entries

    d_scale = 2.0 * (grad_k * corr) @ h.scale
    d_length = float(
        np.sum(scaled_grad * _stationary_grad_lengthscale(spec.kind, dist, length, spec.standard_exponent))
    )
    dcorr_ddist = _stationary_grad_dist(spec.kind, dist, length, spec.standard_exponent)
    weight = np.zeros_like(dist)
    off = ~np.eye(n, dtype=bool)
    weight[off] = 2.0 * scaled_grad[off] * dcorr_ddist[off] / dist[off]
    d_latents = weight.sum(axis=1)[:, None] * b - weight @ b
    grad = ModelGradient(
        latents=d_latents,
        scale=d_scale,
        noise=d_noise,
        lengthscale=d_length,
    )
    return value, grad


def log_joint_and_gradient(
    returns: ReturnMatrix | np.ndarray,
    params: ModelParams,
    spec: KernelSpec,
    cfg: PriorConfig,
) -> tuple[float, ModelGradient]:
    """Log joint and its exact analytic gradient in one factorization."""
    r = _values(returns)
    lik, lik_grad = _likelihood_gradient(r, params, spec)
    pri_grad = _prior_gradient(params, cfg)
    value = lik + log_prior(params, cfg)

    def _add(a: float | None, b: float | None) -> float | None:
        if a is None and b is None:
            return None
        return (a or 0.0) + (b or 0.0)

    grad = ModelGradient(
        latents=lik_grad.latents + pri_grad.latents,
        scale=lik_grad.scale + pri_grad.scale,
        noise=lik_grad.noise + pri_grad.noise,
        lengthscale=_add(lik_grad.lengthscale, pri_grad.lengthscale),
        kernel_variance=_add(lik_grad.kernel_variance, pri_grad.kernel_variance),
    )
    return value, grad


def log_joint_gradient(
    returns: ReturnMatrix | np.ndarray,
    params: ModelParams,
    spec: KernelSpec,
    cfg: PriorConfig,
) -> ModelGradient:
    """Exact analytic gradient of :func:`log_joint` in every coordinate."""
    return log_joint_and_gradient(returns, params, spec, cfg)[1]
