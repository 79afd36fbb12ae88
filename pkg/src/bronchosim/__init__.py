"""Procedural bronchial-airway synthesis, rendering, and depth evaluation."""

from .errors import (
    AlignmentError,
    BronchosimError,
    FormatError,
    GenerationError,
    IngestionError,
    InputError,
    ParameterError,
    PlacementError,
    RouteError,
    TessellationError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "BronchosimError",
    "FormatError",
    "GenerationError",
    "IngestionError",
    "InputError",
    "ParameterError",
    "PlacementError",
    "RouteError",
    "TessellationError",
    "__version__",
]
