"""Exception types shared across the package.

Each family maps to one CLI exit code (see ``foleygen.cli``).
"""


class FoleyError(Exception):
    exit_code = 1


class ConfigError(FoleyError):
    exit_code = 2


class DataError(FoleyError):
    exit_code = 3


class FormatError(DataError):
    """A tensor or checkpoint file failed header validation."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidAudioError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateInputError(ValueError):
    """Input too short or otherwise outside an operation's domain."""


class ShapeError(ValueError):
    pass


class DivergenceError(FoleyError):
    exit_code = 4


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""
