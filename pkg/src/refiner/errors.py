"""Exception types shared across the package."""


class RefinerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(RefinerError):
    """Operands have incompatible shapes; the message carries both shapes."""


class ConfigError(RefinerError):
    """A configuration value is invalid (even kernel size, bad ratio, ...)."""


class NumericError(RefinerError):
    """A non-finite value (NaN/Inf) was produced or fed to an operation."""


class TrainingDiverged(RefinerError):
    """Training loss became non-finite. Carries the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")
