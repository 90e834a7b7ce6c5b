"""Exception types shared across the package."""
from __future__ import annotations


class TapinnError(Exception):
    """Base class for all package errors."""


class NonFiniteError(TapinnError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class ShapeMismatchError(TapinnError, ValueError):
    pass


class LengthMismatchError(TapinnError, ValueError):
    pass


class TooShortError(TapinnError, ValueError):
    """Trajectory does not span enough forcing periods for a Poincare section."""


class TooFewRecordsError(TapinnError, ValueError):
    pass


class SingularError(TapinnError, ArithmeticError):
    pass


class DivergenceError(TapinnError, RuntimeError):
    """Training loss exploded or became NaN."""

    def __init__(self, method: str, seed: int, step: int, loss: float):
        super().__init__(
            f"training diverged: method={method} seed={seed} step={step} loss={loss!r}"
        )
        self.method = method
        self.seed = seed
        self.step = step
        self.loss = loss


class ConfigError(TapinnError, ValueError):
    pass
