"""Doubly robust estimation of treatment-specific survival in discrete time."""

from .estimators import aipw, cf_dtmle, dtmle, ipw, kaplan_meier, tmle_classic
from .nuisance import NuisanceFit, fit_nuisance, predict_nuisance
from .survdata import SurvivalDataset, read_csv, write_csv

__version__ = "0.1.0"

__all__ = [
    "aipw",
    "cf_dtmle",
    "dtmle",
    "ipw",
    "kaplan_meier",
    "tmle_classic",
    "NuisanceFit",
    "fit_nuisance",
    "predict_nuisance",
    "SurvivalDataset",
    "read_csv",
    "write_csv",
]
