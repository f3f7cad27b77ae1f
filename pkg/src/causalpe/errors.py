"""Exception types shared across the package."""


class CpeError(Exception):
    """Base class for all package errors."""


class StructuralError(CpeError, ValueError):
    """Malformed graph, mismatched shapes or an otherwise invalid structure."""


class NumericalError(CpeError, FloatingPointError):
    """A computation produced non-finite values."""


class InversionError(NumericalError):
    """Bisection could not bracket a root of the discrete flow."""


class ArtifactError(CpeError):
    """A pipeline artifact is missing or corrupted."""


class ConfigError(CpeError):
    """Invalid run configuration."""
