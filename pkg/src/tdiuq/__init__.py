"""Hierarchical Bayesian inverse uncertainty quantification for time-series outputs."""

from .core import (NumericalError, ParameterVector, TimeSeriesGrid, TrainingSet, TransientCase,
                   ValidationError, flatten, unflatten)

__version__ = "0.1.0"

__all__ = [
    "NumericalError",
    "ParameterVector",
    "TimeSeriesGrid",
    "TrainingSet",
    "TransientCase",
    "ValidationError",
    "flatten",
    "unflatten",
    "__version__",
]
