"""Ethereum gas price forecasting, recommendation and backtesting."""

from .errors import (
    ArgumentError,
    DataError,
    FitError,
    GasrecError,
    ModelLoadError,
    ParseError,
    TrainingError,
    TransportError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "DataError",
    "FitError",
    "GasrecError",
    "ModelLoadError",
    "ParseError",
    "TrainingError",
    "TransportError",
]
