"""Nuisance regressions: design matrices, logistic fits and the fitted bundle."""

from .design import DesignSpec, hazard_terms, main_terms, rich_terms
from .glm import GlmFit, bernoulli_deviance, fit_logistic
from .lasso import default_lambda_grid, fit_logistic_l1, lambda_max, lasso_path
from .learners import (
    DEFAULT_CLIP,
    FittedLearner,
    LearnerSpec,
    NuisanceFit,
    NuisanceModels,
    constant_nuisance,
    fit_learner,
    fit_nuisance,
    predict_nuisance,
)

__all__ = [
    "DesignSpec",
    "hazard_terms",
    "main_terms",
    "rich_terms",
    "GlmFit",
    "bernoulli_deviance",
    "fit_logistic",
    "default_lambda_grid",
    "fit_logistic_l1",
    "lambda_max",
    "lasso_path",
    "DEFAULT_CLIP",
    "FittedLearner",
    "LearnerSpec",
    "NuisanceFit",
    "NuisanceModels",
    "constant_nuisance",
    "fit_learner",
    "fit_nuisance",
    "predict_nuisance",
]
