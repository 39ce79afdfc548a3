"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto exit codes, so library code should raise the most
specific class that applies.
"""


class AvseError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(AvseError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(AvseError, ValueError):
    """Malformed, missing or incompatible input data."""

    exit_code = 3


class WeightsError(DataError):
    """Weight or checkpoint file cannot be used (corrupt, truncated, mismatched)."""


class NumericError(AvseError, ArithmeticError):
    """Non-finite values encountered during training or inference."""

    exit_code = 4
