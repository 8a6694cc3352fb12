"""Covariance estimation for return series via a latent-variable Gaussian process.

The package fits an asset-by-asset covariance with mean-field variational
inference and applies it to minimum-variance portfolio construction,
missing-return imputation and latent-space embedding.
"""

from .data import (
    PriceTable,
    ReturnMatrix,
    SyntheticSpec,
    compute_returns,
    generate_synthetic,
    load_prices,
    load_returns,
    returns_to_prices,
    save_returns,
)
from .errors import FitError, FormatError, NumericalError, ValidationError
from .finance import (
    BacktestConfig,
    BacktestReport,
    PortfolioWeights,
    backtest,
    equal_weights,
    ledoit_wolf,
    min_variance_weights,
    project_capped_simplex,
    sample_covariance,
    sharpe_ratio,
)
from .kernels import (
    CovarianceEstimate,
    HyperParams,
    JitterPolicy,
    KernelSpec,
    assemble_covariance,
    correlation_gram,
    pairwise_distances,
    safe_cholesky,
)
from .model import (
    ModelParams,
    PriorConfig,
    log_joint,
    log_joint_gradient,
    log_marginal_likelihood,
    log_prior,
)
from .predict import (
    ImputationReport,
    PredictiveDistribution,
    export_embedding,
    gp_conditional,
    loocv_impute,
    mean_abs_dev,
    r2_score,
    reconstruction_r2,
)
from .vi import (
    ElboEstimate,
    FitConfig,
    FitResult,
    VariationalPosterior,
    build_target,
    elbo_estimate,
    fit,
    select_latent_dim,
)

__version__ = "0.1.0"
