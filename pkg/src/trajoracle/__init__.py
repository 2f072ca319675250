"""Longitudinal trajectory encoding, exact retrieval and evidence-fusion prognosis."""

from .errors import (
    ArchiveError,
    ConfigError,
    LeakageError,
    NonFiniteError,
    NormalizationError,
    ParseError,
    ProviderError,
    ShapeError,
    TrajOracleError,
)

__version__ = "0.1.0"

__all__ = [
    "ArchiveError",
    "ConfigError",
    "LeakageError",
    "NonFiniteError",
    "NormalizationError",
    "ParseError",
    "ProviderError",
    "ShapeError",
    "TrajOracleError",
]
