"""Exception types shared across the package."""


class DeltastreamError(ValueError):
    """Base class for all package errors."""


class ShapeError(DeltastreamError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(DeltastreamError):
    """A configuration value violates its invariants."""


class InputError(DeltastreamError):
    """Runtime input (token ids, distributions) is out of range."""


class SessionError(DeltastreamError):
    """A streaming session is used with mismatched parameters."""
