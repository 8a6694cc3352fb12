"""Kernel evaluation, covariance assembly and safe factorization.

Asset covariances are built from latent coordinates ``B`` (one row per asset)
either as a linear-kernel Gram matrix or as a per-asset-scaled correlation
matrix from a stationary kernel, plus a diagonal noise term.

The stationary kernels use a halved decay exponent by default:
``k_exp(d) = exp(-d / (2 l))`` and
``k_m32(d) = (1 + sqrt(3) d / l) exp(-sqrt(3) d / (2 l))``.
``KernelSpec(standard_exponent=True)`` selects the textbook forms
``exp(-d / l)`` and ``(1 + sqrt(3) d / l) exp(-sqrt(3) d / l)`` instead.
Note the default m32 form is not positive definite for every latent
configuration (its spectral density changes sign), so assembled covariances
rely on the noise diagonal and the jitter policy for factorizability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky as _cholesky

from .errors import NumericalError

STATIONARY_KINDS = ("se", "exp", "m32")
KERNEL_KINDS = ("linear",) + STATIONARY_KINDS

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel family to use; all continuous parameters are learned."""

    kind: str
    standard_exponent: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")

    @property
    def is_stationary(self) -> bool:
        return self.kind in STATIONARY_KINDS


@dataclass(frozen=True)
class HyperParams:
    """Continuous kernel parameters.

    ``lengthscale`` is used by stationary kernels, ``kernel_variance`` by the
    linear kernel; exactly the one the kernel needs must be set.  ``scale``
    (per-asset coefficient scales) and ``noise`` (per-asset residual scales)
    are always present.
    """

    scale: np.ndarray
    noise: np.ndarray
    lengthscale: float | None = None
    kernel_variance: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "noise", np.asarray(self.noise, dtype=float))
        if self.scale.ndim != 1 or self.noise.ndim != 1:
            raise ValueError("scale and noise must be 1-D vectors")
        if self.scale.shape != self.noise.shape:
            raise ValueError("scale and noise must have equal length")
        for name in ("scale", "noise"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
                raise ValueError(f"{name} entries must be strictly positive and finite")
        for name in ("lengthscale", "kernel_variance"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be strictly positive and finite")

    @property
    def n_assets(self) -> int:
        return self.scale.shape[0]


@dataclass(frozen=True)
class CovarianceEstimate:
    """An N x N covariance matrix with provenance metadata."""

    matrix: np.ndarray
    estimator_tag: str
    tickers: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("covariance matrix must be square")
        if not np.all(np.isfinite(m)):
            raise ValueError("covariance matrix must be finite")
        scale = np.max(np.abs(m)) if m.size else 0.0
        if not np.allclose(m, m.T, rtol=1e-12, atol=1e-12 * max(scale, 1.0)):
            raise ValueError("covariance matrix must be symmetric")
        if self.tickers is not None and len(self.tickers) != m.shape[0]:
            raise ValueError("tickers length must match matrix dimension")

    @property
    def n_assets(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal jitter added before Cholesky, scaled by mean(diag K).

    Starts at ``base_scale`` and multiplies by ``growth`` per failed attempt
    until ``max_scale`` is exceeded.
    """

    base_scale: float = 1e-8
    growth: float = 10.0
    max_scale: float = 1e-4


DEFAULT_JITTER = JitterPolicy()


def pairwise_distances(latents: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between the rows of an N x Q latent matrix.

    The result is exactly symmetric with an exactly zero diagonal.
    """
    b = np.asarray(latents, dtype=float)
    if b.ndim != 2:
        raise ValueError("latents must be an N x Q matrix")
    if not np.all(np.isfinite(b)):
        raise ValueError("latents must be finite")
    sq = np.sum(b * b, axis=1)
    cross = b @ b.T
    cross = 0.5 * (cross + cross.T)  # keep bitwise symmetry regardless of BLAS
    d2 = sq[:, None] + sq[None, :] - 2.0 * cross
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.clip(d2, 0.0, None))


def _stationary_value(kind: str, d: np.ndarray, lengthscale: float, standard: bool) -> np.ndarray:
    if kind == "se":
        z = d / lengthscale
        return np.exp(-0.5 * z * z)
    if kind == "exp":
        rate = 1.0 / lengthscale if standard else 0.5 / lengthscale
        return np.exp(-rate * d)
    if kind == "m32":
        a = _SQRT3 * d / lengthscale
        decay = 1.0 if standard else 0.5
        return (1.0 + a) * np.exp(-decay * a)
    raise ValueError(f"{kind!r} is not a stationary kernel kind")


def _stationary_grad_dist(kind: str, d: np.ndarray, lengthscale: float, standard: bool) -> np.ndarray:
    """d k(d) / d d, elementwise."""
    if kind == "se":
        z = d / lengthscale
        return -(d / lengthscale**2) * np.exp(-0.5 * z * z)
    if kind == "exp":
        rate = 1.0 / lengthscale if standard else 0.5 / lengthscale
        return -rate * np.exp(-rate * d)
    if kind == "m32":
        a = _SQRT3 * d / lengthscale
        if standard:
            core = -a * np.exp(-a)
        else:
            core = 0.5 * (1.0 - a) * np.exp(-0.5 * a)
        return core * (_SQRT3 / lengthscale)
    raise ValueError(f"{kind!r} is not a stationary kernel kind")


def _stationary_grad_lengthscale(kind: str, d: np.ndarray, lengthscale: float, standard: bool) -> np.ndarray:
    """d k(d) / d lengthscale, elementwise."""
    if kind == "se":
        z = d / lengthscale
        return (d * d / lengthscale**3) * np.exp(-0.5 * z * z)
    if kind == "exp":
        rate = 1.0 / lengthscale if standard else 0.5 / lengthscale
        return (rate * d / lengthscale) * np.exp(-rate * d)
    if kind == "m32":
        a = _SQRT3 * d / lengthscale
        if standard:
            core = -a * np.exp(-a)
        else:
            core = 0.5 * (1.0 - a) * np.exp(-0.5 * a)
        return core * (-a / lengthscale)
    raise ValueError(f"{kind!r} is not a stationary kernel kind")


def correlation_gram(spec: KernelSpec, latents: np.ndarray, hyper: HyperParams) -> np.ndarray:
    """Unit-diagonal Gram matrix of a stationary kernel over latent rows."""
    if not spec.is_stationary:
        raise ValueError("correlation_gram requires a stationary kernel kind")
    if hyper.lengthscale is None:
        raise ValueError("stationary kernels require a lengthscale")
    d = pairwise_distances(latents)
    gram = _stationary_value(spec.kind, d, hyper.lengthscale, spec.standard_exponent)
    np.fill_diagonal(gram, 1.0)
    return gram


def signal_covariance(spec: KernelSpec, latents: np.ndarray, hyper: HyperParams) -> np.ndarray:
    """The noise-free signal part of the covariance.

    linear:      sigma^2 B B^T
    stationary:  diag(scale) K_corr diag(scale)
    """
    b = np.asarray(latents, dtype=float)
    if b.ndim != 2 or b.shape[0] != hyper.n_assets:
        raise ValueError("latents must be N x Q with N matching the hyperparameter vectors")
    if spec.kind == "linear":
        if hyper.kernel_variance is None:
            raise ValueError("linear kernel requires kernel_variance")
        gram = b @ b.T
        gram = 0.5 * (gram + gram.T)
        return hyper.kernel_variance**2 * gram
    return np.outer(hyper.scale, hyper.scale) * correlation_gram(spec, b, hyper)


def assemble_covariance(
    spec: KernelSpec,
    latents: np.ndarray,
    hyper: HyperParams,
    tag: str | None = None,
    tickers: tuple[str, ...] | None = None,
) -> CovarianceEstimate:
    """Full asset covariance: signal kernel plus diagonal noise."""
    k = signal_covariance(spec, latents, hyper) + np.diag(hyper.noise**2)
    if tag is None:
        tag = f"gplvm-{spec.kind}-q{np.asarray(latents).shape[1]}"
    return CovarianceEstimate(matrix=k, estimator_tag=tag, tickers=tickers)


def safe_cholesky(
    matrix: np.ndarray, policy: JitterPolicy = DEFAULT_JITTER
) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``matrix + jitter * I``, escalating jitter on failure.

    Returns ``(L, jitter)`` with ``L L^T = matrix + jitter * I``.  Raises
    :class:`NumericalError` with a condition estimate when the matrix cannot
    be factorized at the maximum jitter.
    """
    k = np.asarray(matrix, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(k)):
        raise NumericalError("matrix contains non-finite entries")
    n = k.shape[0]
    diag_mean = float(np.mean(np.diag(k)))
    scale = policy.base_scale
    eye = np.eye(n)
    while True:
        jitter = scale * diag_mean
        try:
            lower = _cholesky(k + jitter * eye, lower=True, check_finite=False)
            return lower, jitter
        except np.linalg.LinAlgError:
            pass
        next_scale = scale * policy.growth
        if next_scale > policy.max_scale * (1.0 + 1e-12):
            eigs = np.linalg.eigvalsh(k)
            cond = abs(eigs[-1]) / abs(eigs[0]) if eigs[0] != 0 else math.inf
            raise NumericalError(
                f"Cholesky failed at maximum jitter {jitter:.3e} "
                f"(min eigenvalue {eigs[0]:.3e}, condition estimate {cond:.3e})"
            )
        scale = next_scale
