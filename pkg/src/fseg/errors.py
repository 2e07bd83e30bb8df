"""Exception types shared across the package."""


class FsegError(Exception):
    """Base class for all errors raised by this package."""


class FstFormatError(FsegError):
    """Malformed or inconsistent FST file content."""


class DimensionError(FsegError):
    """Shapes of the supplied objects do not conform."""


class InputError(FsegError):
    """Input values violate a precondition (NaN, negative, out of range)."""


class DegenerateCenterError(FsegError):
    """A fixed concept matrix contains an all-zero row."""


class InsufficientDataError(FsegError):
    """Fewer data points than the operation requires."""


class CoverageError(FsegError):
    """One or more categories have no training examples."""

    def __init__(self, message, missing=(), counts=None):
        super().__init__(message)
        self.missing = tuple(missing)
        self.counts = counts


class PaletteError(FsegError):
    """Invalid palette file or conflicting palette entries."""


class UnsupportedError(FsegError):
    """Requested operation is outside the supported envelope."""
