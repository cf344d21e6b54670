"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code family (config, data, numeric).
"""


class VCPError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VCPError):
    """Bad or missing configuration."""


class ValidationError(VCPError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor extents do not line up."""


class NumericError(VCPError, ArithmeticError):
    """Non-finite values or a failed numerical check."""


class DataError(VCPError):
    """Problems with video files, manifests or corpora."""


class FormatError(DataError):
    """Malformed on-disk video file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SpanError(DataError):
    """A video is too short for the requested clip span."""

    def __init__(self, required, actual, video_id=None):
        who = f"video {video_id!r}: " if video_id is not None else ""
        super().__init__(f"{who}need {required} frames, have {actual}")
        self.required = required
        self.actual = actual
        self.video_id = video_id


class RemoteInfeasibleError(DataError):
    """No clip far enough from the cloze span exists in the video."""


class CheckpointError(DataError):
    """Corrupt, truncated or mismatched checkpoint."""

    def __init__(self, message, section=None):
        if section is not None:
            message = f"[{section}] {message}"
        super().__init__(message)
        self.section = section


class RetrievalError(DataError):
    """Retrieval index is empty or malformed."""
