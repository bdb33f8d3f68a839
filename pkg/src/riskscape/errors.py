"""Exception types raised across the package."""


class RiskscapeError(Exception):
    """Base class for all package errors."""


class InvalidInput(RiskscapeError, ValueError):
    """Malformed arguments: wrong shapes, non-finite values, bad configs."""


class EvalError(RiskscapeError, ArithmeticError):
    """An objective evaluation produced a non-finite value."""


class Unsupported(RiskscapeError, NotImplementedError):
    """The requested (family, method) combination has no implementation."""


class DivergenceError(RiskscapeError, ArithmeticError):
    """An optimizer met a non-finite risk.

    The partial trajectory up to the failing iterate is kept on
    ``trajectory`` so callers can inspect it.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
