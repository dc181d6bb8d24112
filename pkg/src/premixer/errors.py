"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PremixerError(Exception):
    exit_code = 1


class ConfigError(PremixerError, ValueError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor extents do not agree."""


class DataError(PremixerError):
    """Input data is malformed or unusable."""

    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataError):
    """Checkpoint missing, corrupt, or incompatible with the requested config."""


class NumericError(PremixerError, ArithmeticError):
    """Non-finite loss or gradient."""

    exit_code = 4
