"""Exception hierarchy shared by every module."""


class BackdoorLabError(Exception):
    pass


class DimensionError(BackdoorLabError, ValueError):
    pass


class DomainError(BackdoorLabError, ValueError):
    pass


class ConfigError(BackdoorLabError, ValueError):
    pass


class EvaluationError(BackdoorLabError, RuntimeError):
    pass


class TrainingError(BackdoorLabError, RuntimeError):
    pass


class FormatError(BackdoorLabError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
