"""Exception types shared across the toolkit."""


class TextBootError(Exception):
    """Base class for every domain error raised by this package."""


class DimensionMismatchError(TextBootError):
    """Two masks (or a mask and a dataset) disagree on shape or frame."""


class EmptyMaskError(TextBootError):
    """An operation that needs at least one set pixel got an empty mask."""


class DegenerateBoxError(TextBootError):
    """A box with zero area was passed where a real window is required."""


class ManifestError(TextBootError):
    """A manifest file is malformed.  Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingImageError(TextBootError):
    """A manifest references an image file that does not exist."""


class TierViolationError(TextBootError):
    """A record carries geometry its annotation tier forbids."""


class WrongTierError(TextBootError):
    """An operation was applied to a record of the wrong tier."""


class TierMismatchError(TextBootError):
    """A strategy or pipeline stage got a pool of an unusable tier."""


class EmptyDatasetError(TextBootError):
    """A dataset with zero records cannot be split or consumed."""


class EmptyTrainingSetError(TextBootError):
    """Training requires at least one example."""


class NonFiniteLossError(TextBootError):
    """The training loss diverged to NaN or infinity."""


class ModelFormatError(TextBootError):
    """A model file has a bad magic, unknown version, or truncated body."""


class DisjointnessError(TextBootError):
    """Strong, pool, and test datasets must not share image ids."""


class TooManyInstancesError(TextBootError):
    """Exhaustive matching is capped at a small instance count."""
