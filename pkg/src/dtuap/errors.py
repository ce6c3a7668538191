"""Exception hierarchy shared by every dtuap module.

The CLI maps each family to an exit code, so raise the most specific class.
"""


class DtuapError(Exception):
    """Base class for all library errors."""


class ConfigError(DtuapError, ValueError):
    """Bad user input: unknown ids, malformed specs, inconsistent options."""


class ShapeError(DtuapError, ValueError):
    """An operation received tensors of incompatible shape."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class DataError(DtuapError):
    """Malformed, truncated or inconsistent on-disk data."""


class NumericError(DtuapError, ArithmeticError):
    """Non-finite losses during training or crafting."""
