"""Online test-time adaptation of a small Vision Transformer.

A frozen ViT backbone whose per-layer Query/Key/Value features are
recalibrated by scale-shift factors generated from a learned per-layer domain
token and the class token, adapted online with a reliable-entropy plus
similarity loss. Ships with a synthetic-data harness for building corrupted
streams and comparing adaptation methods.
"""

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    OracleError,
    PcsrError,
    ReportError,
    ShapeError,
)
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "NumericError",
    "OracleError",
    "PcsrError",
    "ReportError",
    "ShapeError",
    "Tensor",
    "backward",
    "no_grad",
]

__version__ = "0.1.0"
