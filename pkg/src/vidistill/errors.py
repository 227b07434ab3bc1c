"""Exception types shared across the package."""


class VidistillError(Exception):
    pass


class DimensionError(VidistillError, ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(VidistillError, ValueError):
    """Raised when a caller violates an API precondition."""


class ConfigError(VidistillError, ValueError):
    """Raised for invalid configuration values."""


class DegenerateVarianceError(DimensionError):
    """Batch statistics cannot be computed from a single element per channel."""


class TrainingAborted(VidistillError, RuntimeError):
    """A loss became non-finite. ``record`` holds the last good log row, if any."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class FormatError(VidistillError):
    """Base class for on-disk format problems."""

    code = 1


class BadMagicError(FormatError):
    code = 10


class VersionError(FormatError):
    code = 11


class TruncatedFileError(FormatError):
    code = 12


class SplitLeakageError(VidistillError, ValueError):
    """A source video contributes to both train and test splits."""
