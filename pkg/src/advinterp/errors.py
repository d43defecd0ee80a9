"""Exception types shared across the toolkit.

The CLI maps each family to its own exit code, so new errors should subclass
one of these rather than raising bare builtins.
"""


class ConfigError(ValueError):
    """Invalid experiment configuration or argument."""


class InputShapeError(ValueError):
    """A tensor does not have the geometry an operation expects."""


class DataError(RuntimeError):
    """Dataset ingestion or sampling failed."""


class NumericError(FloatingPointError):
    """A NaN or infinite value appeared in a loss or gradient."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss. Carries the trace recorded so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
