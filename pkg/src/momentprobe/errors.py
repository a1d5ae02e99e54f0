"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: usage and configuration
problems exit 1, data problems (bad files, non-finite values) exit 2.
"""


class MomentProbeError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MomentProbeError):
    """An API or CLI was called in a way that can never work."""


class ConfigError(MomentProbeError):
    """A configuration value violates its invariants."""


class DimensionError(ConfigError):
    """Operand shapes are incompatible for the requested operation."""


class InputError(MomentProbeError):
    """A runtime input (not configuration) is invalid."""


class DataError(MomentProbeError):
    """A data file or payload is unreadable or corrupt."""


class NumericError(DataError):
    """A computation produced NaN or Inf."""
