"""Clustering of incomplete block-design rating data with a shared-loadings
mixture of factor analyzers, fitted by exact or partial-E-step EM."""

from .linalg import (
    CovPrecisionPair,
    IndexSplit,
    InversionCounter,
    NotPositiveDefiniteError,
    logdet_observed_block,
    principal_submatrix,
    schur_complement,
    schur_via_precision,
    submatrix_inverse_via_precision,
)
from .missing import (
    GaussianParams,
    ImputationState,
    IncompleteObservation,
    exact_conditional,
    gamma_surrogate,
    init_state,
    kl_missing,
    observed_loglik,
    sweep_cov,
    sweep_mean,
)
from .mixture import (
    ComponentStats,
    DegenerateComponentError,
    FitConfig,
    FitResult,
    ImputationBank,
    MixtureError,
    MixtureParams,
    PatternIndex,
    bic,
    fit_em,
    fit_pem,
    model_search,
    mstep_common_factors,
    param_count,
    responsibilities,
    weighted_stats,
)
from .data import (
    ParseError,
    RatingTable,
    SyntheticSpec,
    generate_bib,
    parse_table,
    write_fit,
    write_table,
)

__version__ = "0.1.0"

__all__ = [
    "CovPrecisionPair", "IndexSplit", "InversionCounter",
    "NotPositiveDefiniteError", "logdet_observed_block",
    "principal_submatrix", "schur_complement", "schur_via_precision",
    "submatrix_inverse_via_precision",
    "GaussianParams", "ImputationState", "IncompleteObservation",
    "exact_conditional", "gamma_surrogate", "init_state", "kl_missing",
    "observed_loglik", "sweep_cov", "sweep_mean",
    "ComponentStats", "DegenerateComponentError", "FitConfig", "FitResult",
    "ImputationBank", "MixtureError", "MixtureParams", "PatternIndex",
    "bic", "fit_em", "fit_pem", "model_search", "mstep_common_factors",
    "param_count", "responsibilities", "weighted_stats",
    "ParseError", "RatingTable", "SyntheticSpec", "generate_bib",
    "parse_table", "write_fit", "write_table",
]
