"""Parallel convolutional adapter for a frozen segmentation backbone, at desk scale."""

from cad.errors import (
    CadError,
    ConfigError,
    ContractError,
    FormatError,
    ManifestError,
    ShapeError,
    StaleCacheError,
)
from cad.tensor import Tensor, backward, recording

__all__ = [
    "CadError",
    "ConfigError",
    "ContractError",
    "FormatError",
    "ManifestError",
    "ShapeError",
    "StaleCacheError",
    "Tensor",
    "backward",
    "recording",
]

__version__ = "0.1.0"
