"""Price-table ingestion, return computation and synthetic data generation.

Price files are UTF-8 comma-delimited text with a header row
``date,<ticker1>,<ticker2>,...``; the first column holds ISO-8601 dates and
every remaining column holds strictly positive close prices.  Supply
dividend/split-adjusted prices if total-return behaviour is desired; the
loader is agnostic.

All functions are pure: random state lives entirely in the caller-provided
seed and inputs are never mutated.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import FormatError, ValidationError
from .kernels import HyperParams, KernelSpec, signal_covariance

_DELIMITERS = {"csv": ",", "tsv": "\t"}


@dataclass(frozen=True)
class PriceTable:
    """N tickers by D+1 dates of positive close prices."""

    tickers: tuple[str, ...]
    dates: tuple[dt.date, ...]
    prices: np.ndarray  # shape (N, D+1)

    def __post_init__(self) -> None:
        p = np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))
        if p.ndim != 2 or p.shape != (len(self.tickers), len(self.dates)):
            raise ValidationError(
                f"price matrix shape {p.shape} does not match "
                f"{len(self.tickers)} tickers x {len(self.dates)} dates"
            )
        if len(set(self.tickers)) != len(self.tickers):
            raise ValidationError("duplicate tickers in price table")
        for earlier, later in zip(self.dates, self.dates[1:]):
            if later <= earlier:
                raise ValidationError(f"dates not strictly increasing at {later}")
        bad = ~(np.isfinite(p) & (p > 0.0))
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise ValidationError(
                f"non-positive or non-finite price for {self.tickers[i]} on {self.dates[j]}"
            )

    @property
    def n_assets(self) -> int:
        return len(self.tickers)


@dataclass(frozen=True)
class ReturnMatrix:
    """N assets by D days of simple returns; dates mark the later day of each pair."""

    tickers: tuple[str, ...]
    dates: tuple[dt.date, ...]
    values: np.ndarray  # shape (N, D)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))
        if v.ndim != 2 or v.shape != (len(self.tickers), len(self.dates)):
            raise ValidationError(
                f"return matrix shape {v.shape} does not match "
                f"{len(self.tickers)} tickers x {len(self.dates)} dates"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError("returns must be finite")
        if np.any(v <= -1.0):
            i, j = np.argwhere(v <= -1.0)[0]
            raise ValidationError(
                f"return below -100% for {self.tickers[i]} on {self.dates[j]}"
            )

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def window(self, start: int, stop: int) -> "ReturnMatrix":
        """Day slice [start, stop) as a new ReturnMatrix."""
        return ReturnMatrix(self.tickers, self.dates[start:stop], self.values[:, start:stop])


@dataclass(frozen=True)
class SyntheticSpec:
    """Configuration of the synthetic factor-structure generator.

    ``latents`` and ``hyper`` override the randomly drawn latent coordinates
    and the unit default hyperparameters; leave them ``None`` for the default
    behaviour.
    """

    n_assets: int
    n_days: int
    latent_dim: int
    noise_scales: np.ndarray  # per-asset, >= 0
    seed: int
    kernel: KernelSpec
    hyper: HyperParams | None = None
    latents: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")
        if self.n_assets < 2:
            raise ValidationError("n_assets must be >= 2")
        if self.n_days < 2:
            raise ValidationError("n_days must be >= 2")
        noise = np.broadcast_to(np.asarray(self.noise_scales, dtype=float), (self.n_assets,)).copy()
        if not np.all(np.isfinite(noise)) or np.any(noise < 0.0):
            raise ValidationError("noise_scales must be finite and >= 0")
        object.__setattr__(self, "noise_scales", noise)
        if self.latents is not None:
            b = np.asarray(self.latents, dtype=float)
            if b.shape != (self.n_assets, self.latent_dim):
                raise ValidationError("latents override must be n_assets x latent_dim")
            object.__setattr__(self, "latents", b)


def _parse_delimited(path: str, fmt: str) -> tuple[tuple[str, ...], tuple[dt.date, ...], np.ndarray]:
    """Parse the delimited layout; missing cells become NaN.

    Raises :class:`FormatError` with row/column context on unparseable cells.
    Row numbers in messages are 1-based file rows (header is row 1).
    """
    if fmt not in _DELIMITERS:
        raise ValidationError(f"unknown file format {fmt!r}")
    try:
        frame = pd.read_csv(path, sep=_DELIMITERS[fmt], dtype=str, skipinitialspace=True)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except pd.errors.ParserError as exc:
        raise FormatError(f"cannot parse {path}: {exc}") from None
    if frame.shape[1] < 2:
        raise FormatError(f"{path}: need a date column plus at least one data column")
    date_col = frame.columns[0]
    tickers = tuple(str(c) for c in frame.columns[1:])

    dates = []
    for row, raw in enumerate(frame[date_col]):
        try:
            dates.append(dt.date.fromisoformat(str(raw).strip()))
        except (TypeError, ValueError):
            raise FormatError(f"{path}: row {row + 2}, column {date_col!r}: bad date {raw!r}") from None

    values = np.full((len(tickers), len(dates)), np.nan)
    for j, ticker in enumerate(tickers):
        for row, raw in enumerate(frame[ticker]):
            if raw is None or (isinstance(raw, float) and np.isnan(raw)) or str(raw).strip() == "":
                continue
            try:
                values[j, row] = float(raw)
            except ValueError:
                raise FormatError(
                    f"{path}: row {row + 2}, column {ticker!r}: bad value {raw!r}"
                ) from None
    return tickers, tuple(dates), values


def load_prices(
    path: str, fmt: str = "csv", drop_incomplete: bool = False
) -> tuple[PriceTable, tuple[str, ...]]:
    """Read and validate a price table.

    Returns ``(table, dropped)``.  Tickers missing any date are an error
    unless ``drop_incomplete`` is set, in which case they are removed and
    reported in ``dropped``.
    """
    tickers, dates, values = _parse_delimited(path, fmt)
    incomplete = [t for j, t in enumerate(tickers) if np.any(np.isnan(values[j]))]
    if incomplete and not drop_incomplete:
        raise ValidationError(
            f"{path}: tickers missing prices for some dates: {', '.join(incomplete)} "
            "(pass drop_incomplete to remove them)"
        )
    keep = [j for j, t in enumerate(tickers) if t not in incomplete]
    if not keep:
        raise ValidationError(f"{path}: no ticker has a full price history")
    table = PriceTable(
        tickers=tuple(tickers[j] for j in keep),
        dates=dates,
        prices=values[keep],
    )
    return table, tuple(incomplete)


def compute_returns(table: PriceTable) -> ReturnMatrix:
    """Simple returns r[n, d] = (p[n, d+1] - p[n, d]) / p[n, d]; drops the first date."""
    if len(table.dates) < 2:
        raise ValidationError("need at least two dates to compute returns")
    p = table.prices
    values = (p[:, 1:] - p[:, :-1]) / p[:, :-1]
    return ReturnMatrix(tickers=table.tickers, dates=table.dates[1:], values=values)


def save_returns(returns: ReturnMatrix, path: str) -> None:
    """Write a return matrix in the same delimited layout as price files."""
    frame = pd.DataFrame(
        returns.values.T,
        index=[d.isoformat() for d in returns.dates],
        columns=list(returns.tickers),
    )
    frame.index.name = "date"
    frame.to_csv(path, float_format="%.12g")


def load_returns(path: str, fmt: str = "csv") -> ReturnMatrix:
    """Read a return matrix written by :func:`save_returns`."""
    tickers, dates, values = _parse_delimited(path, fmt)
    if np.any(np.isnan(values)):
        j, row = np.argwhere(np.isnan(values))[0]
        raise ValidationError(f"{path}: missing return for {tickers[j]} on {dates[row]}")
    return ReturnMatrix(tickers=tickers, dates=dates, values=values)


def _default_hyper(spec: SyntheticSpec) -> HyperParams:
    ones = np.ones(spec.n_assets)
    if spec.kernel.kind == "linear":
        return HyperParams(scale=ones, noise=ones, kernel_variance=1.0)
    return HyperParams(scale=ones, noise=ones, lengthscale=1.0)


def generate_synthetic(spec: SyntheticSpec) -> tuple[ReturnMatrix, np.ndarray, np.ndarray]:
    """Draw a return matrix from the generative model.

    Latent rows are standard normal (unless overridden), each day is an
    independent zero-mean draw with the signal covariance implied by the
    kernel, and per-asset noise with the configured scales is added.  Returns
    ``(returns, true_covariance, latents)`` where ``true_covariance`` is the
    exact signal-plus-noise covariance of the generator.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.latents is not None:
        latents = spec.latents.copy()
    else:
        latents = rng.standard_normal((spec.n_assets, spec.latent_dim))
    hyper = spec.hyper if spec.hyper is not None else _default_hyper(spec)
    if hyper.n_assets != spec.n_assets:
        raise ValidationError("hyper override must match n_assets")

    k_signal = signal_covariance(spec.kernel, latents, hyper)
    # eigh-based factor: exact for rank-deficient signal (duplicated latents,
    # zero noise) where Cholesky jitter would perturb the draws; eigenvalues
    # within roundoff of zero are clipped to exactly zero
    eigvals, eigvecs = np.linalg.eigh(k_signal)
    floor = 1e-12 * max(float(eigvals[-1]), 0.0)
    eigvals = np.where(eigvals > floor, eigvals, 0.0)
    factor = eigvecs * np.sqrt(eigvals)
    draws = factor @ rng.standard_normal((spec.n_assets, spec.n_days))
    draws = draws + spec.noise_scales[:, None] * rng.standard_normal((spec.n_assets, spec.n_days))

    true_cov = k_signal + np.diag(spec.noise_scales**2)
    start = dt.date(2000, 1, 3)
    dates = tuple(start + dt.timedelta(days=i) for i in range(spec.n_days))
    tickers = tuple(f"A{i:03d}" for i in range(spec.n_assets))
    returns = ReturnMatrix(tickers=tickers, dates=dates, values=draws)
    return returns, true_cov, latents


def returns_to_prices(returns: ReturnMatrix, initial_price: float = 100.0) -> PriceTable:
    """Compound returns into a price table starting at ``initial_price``."""
    growth = np.cumprod(1.0 + returns.values, axis=1)
    prices = np.concatenate(
        [np.full((returns.n_assets, 1), initial_price), initial_price * growth], axis=1
    )
    first = returns.dates[0] - dt.timedelta(days=1)
    return PriceTable(
        tickers=returns.tickers, dates=(first,) + returns.dates, prices=prices
    )
