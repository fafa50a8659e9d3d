"""Covariate Gaussian process latent variable model.

Exact-GP latent variable model whose feature mappings take latent
coordinates and observed covariates jointly, with an identifiable
additive-plus-interaction kernel and variational treatment of censored
covariates.
"""

from .exceptions import (
    CsvParseError,
    DegenerateDecompositionError,
    DegenerateLengthscaleError,
    DegenerateTruncationError,
    NumericalError,
)
from .inference import FitResult, OptimizerConfig, censored_posterior, evaluate_recovery, fit
from .kernels import AddIntParams, IntegrationDomain, KernelKind, SeArdParams
from .model import CensoringPrior, Dataset, LatentState, ModelConfig, ModelParams

__version__ = "0.1.0"

__all__ = [
    "AddIntParams",
    "CensoringPrior",
    "CsvParseError",
    "Dataset",
    "DegenerateDecompositionError",
    "DegenerateLengthscaleError",
    "DegenerateTruncationError",
    "FitResult",
    "IntegrationDomain",
    "KernelKind",
    "LatentState",
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "OptimizerConfig",
    "SeArdParams",
    "censored_posterior",
    "evaluate_recovery",
    "fit",
]
