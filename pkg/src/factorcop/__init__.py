"""Factor copula models for unbalanced longitudinal data."""

from .bicopula import BicopParam, Family, bicop_pdf, hfun, hinv, uni_cdf, uni_quantile
from .dataset import ColumnSchema, LongitudinalDataset, ResponseKind, load_csv, summarize, write_csv
from .errors import ConvergenceError, DataError, DomainError, FactorCopError, GodambeError
from .factor_model import (
    FactorCopulaSpec,
    aic_bic,
    fit_factor,
    fit_two_stage,
    godambe_se,
    loglik_1f,
    loglik_2f,
    make_quadrature,
)
from .marginals import MarginalParams, fit_marginal, marginal_loglik, pit
from .mixed_baseline import MixedParams, MixedSpec, fit_mixed, mixed_loglik, simulate_mixed

__version__ = "0.1.0"

__all__ = [
    "BicopParam", "Family", "bicop_pdf", "hfun", "hinv", "uni_cdf", "uni_quantile",
    "ColumnSchema", "LongitudinalDataset", "ResponseKind", "load_csv", "summarize", "write_csv",
    "ConvergenceError", "DataError", "DomainError", "FactorCopError", "GodambeError",
    "FactorCopulaSpec", "aic_bic", "fit_factor", "fit_two_stage", "godambe_se",
    "loglik_1f", "loglik_2f", "make_quadrature",
    "MarginalParams", "fit_marginal", "marginal_loglik", "pit",
    "MixedParams", "MixedSpec", "fit_mixed", "mixed_loglik", "simulate_mixed",
]
