"""Average treatment effects with incomplete confounder proxies."""

from .datagen import IncompleteMatrix, ObservationalDataset, SimulationConfig, simulate
from .estimators import AteEstimate, aipw, mdc_mi, mdc_process, regression_adjust, rubin_aggregate
from .miwae import LatentModel, TrainConfig, fit_model, posterior_mean, posterior_resample

__version__ = "0.1.0"

__all__ = [
    "AteEstimate",
    "IncompleteMatrix",
    "LatentModel",
    "ObservationalDataset",
    "SimulationConfig",
    "TrainConfig",
    "aipw",
    "fit_model",
    "mdc_mi",
    "mdc_process",
    "posterior_mean",
    "posterior_resample",
    "regression_adjust",
    "rubin_aggregate",
    "simulate",
]
