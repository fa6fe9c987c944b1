"""Sensitivity-aware grouped vector quantization of weight matrices."""

from .edsg import QuantizeConfig, decode, quantize_matrix
from .errors import (
    FormatError,
    InfeasibleError,
    InvariantError,
    NumericError,
    RsavqError,
    UnsupportedVersionError,
    ValidationError,
)

__all__ = [
    "QuantizeConfig",
    "decode",
    "quantize_matrix",
    "RsavqError",
    "FormatError",
    "UnsupportedVersionError",
    "ValidationError",
    "NumericError",
    "InfeasibleError",
    "InvariantError",
]

__version__ = "0.1.0"
