"""
Error hierarchy.
Library code raises these; the CLI maps `exit_code` to the process status.
"""

from typing import Optional


class RDCNetError(Exception):
    """Base class for every error raised by the package."""
    exit_code = 1


class ConfigError(RDCNetError):
    """Invalid configuration value. `field` names the offending key."""
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(ConfigError):
    """Tensor or parameter shapes do not fit together."""


class GenerationError(ConfigError):
    """Synthetic data could not be generated with the requested parameters."""


class UsageError(RDCNetError):
    """An API was called in a way its contract forbids."""
    exit_code = 2


class DataIOError(RDCNetError):
    """Reading or writing a file failed. `path` names the file."""
    exit_code = 3

    def __init__(self, message: str, path=None):
        self.path = str(path) if path is not None else None
        if self.path and self.path not in message:
            message = f"{message} ({self.path})"
        super().__init__(message)


class FormatError(DataIOError):
    """A file exists but its content is not in the expected format."""


class NumericError(RDCNetError):
    """Training produced a non-finite value."""
    exit_code = 4

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class MissingInputError(RDCNetError):
    """An input that must exist (e.g. a prediction for a gt image) is absent."""
    exit_code = 5

    def __init__(self, message: str, path=None):
        self.path = str(path) if path is not None else None
        if self.path and self.path not in message:
            message = f"{message}: {self.path}"
        super().__init__(message)
