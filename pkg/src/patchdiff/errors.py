"""Exception types shared across the toolkit."""


class PatchDiffError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(PatchDiffError, ValueError):
    """An input violated a documented precondition."""


class InvalidConfigError(ValidationError):
    pass


class InvalidRangeError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class TimestepRangeError(ValidationError):
    pass


class DivisibilityError(ValidationError):
    pass


class ProbeTooSmallError(ValidationError):
    pass


class TooFewRowsError(ValidationError):
    pass


class UnsupportedImageSizeError(ValidationError):
    """An image is too small for the extractor's pooling stack."""


class CoefficientUndefinedError(ValidationError):
    """The paper-literal diversity coefficient divides by zero at n = 2."""


class ConfigFileError(ValidationError):
    """A run-configuration file contains unknown or malformed entries."""


class ImageFormatError(ValidationError):
    """An image file is not 8-bit RGB or is otherwise unreadable."""


class DivergenceError(PatchDiffError, RuntimeError):
    """Training or guided sampling produced a nonfinite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ArchiveError(PatchDiffError, RuntimeError):
    """Base class for checkpoint/weight container failures."""


class BadMagicError(ArchiveError):
    pass


class VersionMismatchError(ArchiveError):
    pass


class HashMismatchError(ArchiveError):
    pass


class MissingArrayError(ArchiveError):
    def __init__(self, name):
        super().__init__(f"archive is missing array {name!r}")
        self.name = name


class ArrayShapeError(ArchiveError):
    def __init__(self, name, expected, found):
        super().__init__(
            f"array {name!r} has shape {tuple(found)}, expected {tuple(expected)}"
        )
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)


class SweepFailedError(PatchDiffError, RuntimeError):
    """Every row of a receptive-field sweep failed."""
