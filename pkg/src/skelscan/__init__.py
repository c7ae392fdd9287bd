"""Skeleton action recognition with spatial attention and bidirectional selective scans.

The numerical core is a small reverse-mode autodiff engine over NumPy
(:mod:`skelscan.tensor`); the selective-scan recurrence runs in a compiled
kernel when available and in NumPy otherwise (:mod:`skelscan.kernels`).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ContractError,
    DataError,
    DivideByZeroError,
    NumericError,
    ParseError,
    ShapeError,
    SkelscanError,
    TopologyError,
)
from .tensor import Tape, Tensor, no_grad, precision, set_precision  # noqa: E402

__all__ = [
    "__version__",
    "ConfigError",
    "ContractError",
    "DataError",
    "DivideByZeroError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "SkelscanError",
    "TopologyError",
    "Tape",
    "Tensor",
    "no_grad",
    "precision",
    "set_precision",
]
