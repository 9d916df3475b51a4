"""Exception types shared across the package."""


class GMENetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GMENetError, ValueError):
    """Invalid network, schedule or pipeline configuration."""


class ValidationError(GMENetError, ValueError):
    """Input data failed a precondition (shape, range, finiteness)."""


class AlignmentError(GMENetError, ValueError):
    """Teacher and student structures or attention lists do not line up."""


class DataError(GMENetError, OSError):
    """A dataset file or directory is missing or unreadable."""


class TrainingError(GMENetError, RuntimeError):
    """Training produced a non-finite loss or violated a runtime contract."""
