"""Exception hierarchy. Each class maps onto one CLI exit code."""


class LosaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LosaError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(LosaError, ValueError):
    """Invalid configuration key, value or combination."""


class InfeasibleError(LosaError, ValueError):
    """A budget or constraint set admits no solution."""

    def __init__(self, msg, feasible=None):
        super().__init__(msg)
        self.feasible = feasible


class NumericError(LosaError, ArithmeticError):
    """A computation produced non-finite values."""


class CheckpointError(LosaError, OSError):
    """Checkpoint file is malformed, truncated or inconsistent."""
