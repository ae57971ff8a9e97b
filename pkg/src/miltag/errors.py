"""Exception taxonomy shared across the toolkit.

Error classes map onto CLI exit codes: usage and configuration problems
exit 1, data and file-format problems exit 2, numeric failures exit 3.
"""


class MiltagError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MiltagError):
    """Invalid configuration value, key, or combination."""


class ShapeError(MiltagError):
    """Array arguments with incompatible or invalid shapes."""


class EmptyBagError(MiltagError):
    """A bag with zero instances where at least one is required."""


class DomainError(MiltagError):
    """Scalar argument outside the mathematical domain of a function."""


class FormatError(MiltagError):
    """Malformed or corrupted file content.

    ``offset`` holds the byte position at which the problem was detected,
    or None when the error is not tied to a position (missing sidecar,
    bad CSV row, and similar).
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class NumericError(MiltagError):
    """Non-finite values or failed numeric checks at runtime."""
