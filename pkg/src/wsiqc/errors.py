"""Exception hierarchy shared by all wsiqc modules."""


class WsiqcError(Exception):
    """Base class for every error raised by this package."""


class InputError(WsiqcError):
    """Bad input data: unreadable files, malformed records, wrong sizes."""


class UnsupportedFormat(InputError):
    pass


class CorruptPyramid(InputError):
    pass


class MagnificationUnavailable(InputError):
    pass


class MalformedDetectionLine(InputError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class MaskSizeMismatch(InputError):
    pass


class UnknownClass(InputError):
    pass


class SpecOutOfBounds(InputError):
    pass


class EvaluationError(WsiqcError):
    """A metric could not be computed from otherwise valid inputs."""


class NotEvaluable(EvaluationError):
    """Inputs were absent or degenerate; callers impute and flag."""


class InsufficientBackground(NotEvaluable):
    pass


class NoContentPatches(NotEvaluable):
    pass


class ZeroContentArea(NotEvaluable):
    pass


class ZeroVariance(EvaluationError):
    pass


class TooFewSamples(EvaluationError):
    pass


class DegenerateCalibration(EvaluationError):
    pass


class DegenerateTargets(EvaluationError):
    pass


class WindowTooSmall(EvaluationError):
    pass


class EmptyDataset(EvaluationError):
    pass


class ConstantFeatureWarning(UserWarning):
    pass


class StageError(WsiqcError):
    """Wraps a module error with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
