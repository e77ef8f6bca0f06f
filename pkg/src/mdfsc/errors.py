"""Exception hierarchy shared by every module of the package."""


class MDFSCError(Exception):
    """Base class for all package errors."""


class ContractError(MDFSCError, ValueError):
    """An operation was called with inputs that violate its preconditions."""


class IngestionError(MDFSCError):
    """An image file could not be read or decoded."""


class FitError(MDFSCError):
    """A fitting routine received degenerate data."""


class LoadError(MDFSCError):
    """A persisted artifact is truncated, tampered with, or of the wrong version."""


class UndefinedMetricError(MDFSCError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class NumericError(MDFSCError, FloatingPointError):
    """Training produced non-finite values."""


class ConfigError(MDFSCError):
    """A run configuration is malformed."""
