"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data and format problems exit 2, numerical failures exit 3.
"""


class HsiSegError(Exception):
    """Base class for all toolkit errors."""


class FormatError(HsiSegError):
    """A binary file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(HsiSegError):
    """Array shapes are incompatible for the requested operation."""


class DomainError(HsiSegError):
    """An input is outside the mathematical domain of an operation."""


class ConfigError(HsiSegError):
    """A configuration value or combination is invalid."""


class NumericsError(HsiSegError):
    """A computation produced a non-finite result (e.g. NaN loss)."""
