"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ParameterError / FormatError /
ShapeError are input or config problems (exit 2), PipelineError is a
mid-pipeline failure (exit 3), LayoutError and StagingError are checkpoint
staging problems (exit 4).
"""


class VpdError(Exception):
    """Base class for all package errors."""


class FormatError(VpdError):
    """Malformed on-disk data. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(VpdError):
    """Array shapes do not satisfy an operation's contract."""


class ParameterError(VpdError):
    """A value violates a documented precondition or invariant."""


class ProjectionError(ParameterError):
    """Point outside the camera's valid projection domain."""


class PipelineError(VpdError):
    """A stage of the data or training pipeline cannot proceed."""


class LayoutError(VpdError):
    """Parameter layout mismatch between a checkpoint and a model config."""


class StagingError(VpdError):
    """Training stage and checkpoint are incompatible."""
