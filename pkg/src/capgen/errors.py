"""Exception hierarchy shared across the package."""


class CapgenError(Exception):
    """Base class for every error raised by capgen."""

    exit_code = 1


class UsageError(CapgenError, ValueError):
    """A function was called outside its contract."""


class ShapeError(UsageError):
    """Operand extents are incompatible."""


class DomainError(CapgenError, ValueError):
    """Input lies outside the domain of a mathematical function."""

    exit_code = 3


class ConfigError(UsageError):
    """Invalid configuration value or unknown configuration key."""


class DataError(CapgenError):
    """Dataset, image or caption input could not be read."""

    exit_code = 2


class ImageParseError(DataError):
    """Malformed PPM/PGM payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(DataError):
    """Checkpoint file is malformed or does not match the model."""


class NumericError(CapgenError, FloatingPointError):
    """A computation produced NaN or Inf."""

    exit_code = 3
