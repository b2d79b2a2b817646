"""Exception hierarchy shared by all modules."""


class TerracostError(Exception):
    """Base class for every domain error raised by this package."""


class InvalidArg(TerracostError, ValueError):
    pass


class OutOfBounds(TerracostError):
    pass


class FormatError(TerracostError):
    pass


class NonTraversable(TerracostError):
    pass


class DegeneratePath(TerracostError):
    pass


class DegenerateSegment(TerracostError):
    pass


class ResolutionMismatch(TerracostError):
    pass


class EmptyDataset(TerracostError):
    pass


class EmptyBatch(TerracostError):
    pass


class EmptyWindow(TerracostError):
    pass


class EmptyPath(TerracostError):
    pass


class EmptySplit(TerracostError):
    pass


class ShapeMismatch(TerracostError):
    pass


class DivergenceDetected(TerracostError):
    pass


class ZeroTruth(TerracostError):
    pass


class Unreachable(TerracostError):
    pass


class SegmentError(TerracostError):
    """Wraps an extraction failure with the index of the offending segment."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"segment {index}: {cause}")
        self.index = index
        self.cause = cause
