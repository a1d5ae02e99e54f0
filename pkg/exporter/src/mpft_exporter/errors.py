class ExporterError(Exception):
    """Base class; CLI maps subclasses onto exit codes."""


class ConfigError(ExporterError):
    """Unknown model, bad mode, or invalid flags (exit 1)."""


class DataError(ExporterError):
    """Unreadable input data (exit 2)."""
