"""Error types shared across the package."""
from .tensor import DimensionError


class ConfigError(ValueError):
    """A configuration violates a structural constraint (divisibility, ranges, schema)."""


class UsageError(ValueError):
    """An operation was asked to do something it does not support for this input."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite value."""


__all__ = ["ConfigError", "DimensionError", "NumericalError", "UsageError"]
