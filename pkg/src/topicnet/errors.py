"""Exception hierarchy shared by every module in the package."""


class TopicNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TopicNetError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(TopicNetError):
    """A computation produced or would produce non-finite values."""


class ConfigError(TopicNetError):
    """A configuration value violates its contract."""


class FormatError(TopicNetError):
    """A serialized file is malformed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


class IoError(TopicNetError):
    """A file or directory could not be read or written."""
