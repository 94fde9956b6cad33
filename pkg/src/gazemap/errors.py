"""Exception hierarchy.

Every exception raised for bad *input* derives from :class:`GazemapError`;
the command-line layer maps those to exit code 2 and anything else to 1.
"""


class GazemapError(Exception):
    """Base class for all input/contract errors raised by the package."""


# geometry
class TooFewPoints(GazemapError):
    pass


class DegenerateConfiguration(GazemapError):
    pass


class NoConsensus(GazemapError):
    pass


class PointAtInfinity(GazemapError):
    pass


# features / imaging
class ImageTooSmall(GazemapError):
    pass


class UnreadableImage(GazemapError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"unreadable image: {self.path}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


# registry
class DuplicateImageId(GazemapError):
    pass


class PoseForUnknownImage(GazemapError):
    pass


class UnknownImage(GazemapError):
    pass


class BoxOutOfBounds(GazemapError):
    pass


class InvertedBox(GazemapError):
    pass


class NoSeeds(GazemapError):
    pass


class RegistryIOError(GazemapError):
    pass


class FormatVersionMismatch(GazemapError):
    pass


class ChecksumMismatch(GazemapError):
    pass


# session
class GazeLogError(GazemapError):
    pass


class MalformedRow(GazeLogError):
    def __init__(self, line, reason=""):
        self.line = line
        super().__init__(f"malformed row at line {line}" + (f": {reason}" if reason else ""))


class NonMonotonicTimestamp(GazeLogError):
    def __init__(self, line):
        self.line = line
        super().__init__(f"non-monotonic timestamp at line {line}")


class FrameSetError(GazemapError):
    pass


class NoHomography(GazemapError):
    pass


# metrics
class ZeroTotal(GazemapError):
    pass


class CountExceedsTotal(GazemapError):
    pass


class EmptyList(GazemapError):
    pass


class LengthMismatch(GazemapError):
    pass


class ZeroVariance(GazemapError):
    pass


class DegenerateSample(GazemapError):
    pass


class TooFewWorkers(GazemapError):
    pass


class KeyMismatch(GazemapError):
    pass


class ZeroSystemDwell(GazemapError):
    pass


class SchemaError(GazemapError):
    pass


# synth
class InvalidWarpRange(GazemapError):
    pass


class PointOutsideScene(GazemapError):
    pass
