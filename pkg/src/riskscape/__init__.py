"""Non-convex M-estimation: empirical and population risks, optimizers and landscape tools."""

__version__ = "0.1.0"

from .errors import DivergenceError, EvalError, InvalidInput, RiskscapeError, Unsupported  # noqa: E402

__all__ = [
    "__version__",
    "DivergenceError",
    "EvalError",
    "InvalidInput",
    "RiskscapeError",
    "Unsupported",
]
