"""
Exception types raised across the package.

Everything caused by bad input derives from ValueError so callers can keep
catching (FileNotFoundError, ValueError) at the top level.
"""


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ValueError):
    """A caller broke an API precondition (e.g. non-scalar loss)."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Invalid configuration or split layout."""


class FormatError(ValueError):
    """Bad magic, version or header in a binary file."""


class LengthError(FormatError):
    """Binary payload shorter than its header announces."""


class UnsupportedRateError(ValueError):
    """Sample rate cannot be reduced by an integer factor."""


class MetricUndefinedError(ValueError):
    """No class carries both positives and negatives."""


class NonFiniteError(FloatingPointError):
    """NaN/Inf detected while checked mode is on."""


class TrainingDivergedError(RuntimeError):
    """Training halted on a non-finite loss or gradient."""
