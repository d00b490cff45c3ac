"""Exception hierarchy shared by every mprlab module."""


class MPRError(Exception):
    """Base class for all mprlab errors."""


class ConfigError(MPRError, ValueError):
    """Bad configuration, shape mismatch, or missing upstream artifact."""


class NumericError(MPRError, ArithmeticError):
    """A computation produced a non-finite value."""


class UsageError(MPRError, TypeError):
    """An API was called in a way its contract forbids."""


class PreprocessingError(MPRError, ValueError):
    """Track data cannot be prepared as requested."""
