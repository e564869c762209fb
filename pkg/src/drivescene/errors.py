"""Exception and warning classes raised across the package."""
from __future__ import annotations


class DriveSceneError(Exception):
    """Base class for all package errors."""


# labels / manifests
class LabelParseError(DriveSceneError):
    pass


class EmptyText(LabelParseError):
    pass


class MalformedNumeric(LabelParseError):
    def __init__(self, section: str, text: str):
        super().__init__(f"no parseable number in section {section!r}: {text!r}")
        self.section = section
        self.text = text


class ManifestError(DriveSceneError):
    pass


class CountMismatch(ManifestError):
    pass


class DuplicateImageRef(ManifestError):
    pass


class ParseError(ManifestError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# prompt engine
class MissingBaseTemplate(DriveSceneError):
    pass


class EmptyEvalSet(DriveSceneError):
    pass


# mining
class MisalignedWindow(DriveSceneError):
    pass


class AlignmentError(DriveSceneError):
    def __init__(self, missing: list[str]):
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        super().__init__(f"{len(missing)} frame ids missing from label streams: {shown}")
        self.missing = list(missing)


# synthesis
class InfeasibleConfig(DriveSceneError):
    pass


class NTooLarge(DriveSceneError):
    pass


# distillation
class SupportMismatch(DriveSceneError):
    pass


class ShapeMismatch(DriveSceneError):
    pass


class DivergenceDetected(DriveSceneError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step
        self.value = value


# quantization
class EmptyBatch(DriveSceneError):
    pass


class ZeroStatsChannel(UserWarning):
    """Some activation statistics were zero and have been floored."""


# evaluation
class LengthMismatch(DriveSceneError):
    pass


class NoTasks(DriveSceneError):
    pass


class DegenerateVariance(UserWarning):
    """Reference values have zero variance; R^2 is undefined."""


# inference / orchestration
class InferenceError(DriveSceneError):
    pass


class Timeout(InferenceError):
    pass


class ProtocolError(InferenceError):
    pass


class ServiceUnavailable(InferenceError):
    pass


class PortInUse(InferenceError):
    pass


class ConfigError(DriveSceneError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class StageError(DriveSceneError):
    """Wraps a module error with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
