"""Variational channel and covariance estimation for passive-RIS mmWave uplinks."""

from risvi.errors import (
    ConfigError,
    ContractViolation,
    InvalidDimensionError,
    MissingArtifactError,
    NumericalFailure,
    RisViError,
    TrainingFailure,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "InvalidDimensionError",
    "MissingArtifactError",
    "NumericalFailure",
    "RisViError",
    "TrainingFailure",
]
