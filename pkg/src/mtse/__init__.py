"""Multi-task training of a complex-masking speech enhancer against a frozen recognizer."""

from .errors import (
    ConfigurationError,
    ContractError,
    DomainError,
    LengthError,
    MtseError,
    NumericError,
    ShapeError,
    TokenError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DomainError",
    "LengthError",
    "MtseError",
    "NumericError",
    "ShapeError",
    "TokenError",
    "__version__",
]
