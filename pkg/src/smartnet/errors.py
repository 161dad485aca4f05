"""Exception hierarchy shared by every smartnet module."""


class SmartNetError(Exception):
    """Base class for all errors raised by smartnet."""


class DimensionError(SmartNetError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SmartNetError, ValueError):
    """A value lies outside the domain an operation accepts (e.g. a label index)."""


class UsageError(SmartNetError, RuntimeError):
    """An API was used out of its contract (second backward, odd batch, ...)."""


class ParseError(SmartNetError, ValueError):
    """A binary dataset file is malformed. ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InvalidPlanError(SmartNetError, ValueError):
    """Mask densities violate ``0 <= c_shared <= min(c_clean, c_adv) <= 1``."""


class InfeasiblePlanError(SmartNetError, ValueError):
    """The union of both masks would exceed the tensor (``c_C + c_A - c_i > 1``)."""


class ConfigError(SmartNetError, ValueError):
    """Bad or unknown configuration value."""


class DataError(SmartNetError, OSError):
    """A referenced data file is missing or unreadable."""


class NumericError(SmartNetError, FloatingPointError):
    """Training produced a non-finite loss."""


class CheckpointVersionError(SmartNetError, ValueError):
    """Checkpoint magic or format version does not match this build."""
