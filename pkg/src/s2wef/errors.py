"""Exception types shared across the package."""


class S2wefError(Exception):
    """Base class for all package errors."""


class ConfigurationError(S2wefError):
    """Invalid configuration, degenerate input sizes, or contract misuse."""


class ShapeError(S2wefError):
    """Array shapes incompatible with the requested operation."""


class HistoryError(S2wefError):
    """An operation needs prior global models that do not exist yet."""


class NumericError(S2wefError):
    """Non-finite values encountered during training."""


class TraceError(S2wefError):
    """Malformed or truncated trace file."""
