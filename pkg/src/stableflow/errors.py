"""Error types shared across the package."""


class StableFlowError(Exception):
    """Base class for package errors."""


class ShapeError(StableFlowError, ValueError):
    """An array argument has the wrong dimension or an inconsistent shape."""


class NumericError(StableFlowError, ArithmeticError):
    """A computation produced a non-finite value or hit a singular matrix."""


class DivergenceError(StableFlowError, RuntimeError):
    """A simulated state left the workspace bound or became non-finite.

    Carries enough context (step index, offending state) to locate the
    blow-up in a rollout.
    """

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


class ConfigError(StableFlowError, ValueError):
    """An experiment configuration failed validation."""
