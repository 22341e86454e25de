"""Exception types raised by panoattn.

Library code raises these; the CLI maps them onto exit codes.
"""


class PanoattnError(Exception):
    """Base class for all panoattn errors."""


class ConfigError(PanoattnError, ValueError):
    """Invalid rig, layout or run configuration."""


class ArgumentError(PanoattnError, ValueError):
    """Bad argument: wrong shape, out-of-range value, mismatched cache."""


class NumericError(PanoattnError, ArithmeticError):
    """Non-finite values reached a kernel."""

    def __init__(self, message: str, window_id: int | None = None):
        super().__init__(message)
        self.window_id = window_id


class StageError(PanoattnError, RuntimeError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
