"""Individually weighted historical-control priors for Bayesian trial analysis."""

from .data_model import CovariateSchema, StudyCollection, SubjectRecord, validate_collection
from .models import (
    Hyperprior,
    MapNormalModel,
    NormalLinearModel,
    PriorConstruction,
    PriorKind,
    WeibullModel,
    optimal_power,
    resolve_weights,
)
from .sampler import SamplerConfig, conjugate_normal_posterior, diagnostics, sample
from .weighting import mahalanobis_weights, model_weights

__version__ = "0.1.0"

__all__ = [
    "CovariateSchema",
    "Hyperprior",
    "MapNormalModel",
    "NormalLinearModel",
    "PriorConstruction",
    "PriorKind",
    "SamplerConfig",
    "StudyCollection",
    "SubjectRecord",
    "WeibullModel",
    "conjugate_normal_posterior",
    "diagnostics",
    "mahalanobis_weights",
    "model_weights",
    "optimal_power",
    "resolve_weights",
    "sample",
    "validate_collection",
]
