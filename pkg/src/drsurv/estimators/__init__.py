"""Estimators of treatment-specific survival at a fixed time."""

from .basic import aipw, eif_evaluate, eif_weights, kaplan_meier, survival_products, telescoping_terms
from .crossfit import FoldPlan, cf_dtmle, crossfit_nuisance
from .report import EstimateReport, wald_interval, z_quantile
from .targeting import (
    FLOOR,
    HCovariates,
    TiltCoefficients,
    drift_plugin,
    dtmle,
    h_covariates,
    ipw,
    run_targeting,
    score_components,
    stopping_tolerance,
    tilt_step,
    tmle_classic,
)

__all__ = [
    "aipw",
    "eif_evaluate",
    "eif_weights",
    "kaplan_meier",
    "survival_products",
    "telescoping_terms",
    "FoldPlan",
    "cf_dtmle",
    "crossfit_nuisance",
    "EstimateReport",
    "wald_interval",
    "z_quantile",
    "FLOOR",
    "HCovariates",
    "TiltCoefficients",
    "drift_plugin",
    "dtmle",
    "h_covariates",
    "ipw",
    "run_targeting",
    "score_components",
    "stopping_tolerance",
    "tilt_step",
    "tmle_classic",
]
