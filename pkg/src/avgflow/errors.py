"""Exception types shared across the package."""


class AvgFlowError(Exception):
    """Base class for all package errors."""


class ConfigError(AvgFlowError, ValueError):
    """Invalid configuration or inconsistent inputs."""


class NumericError(AvgFlowError, ArithmeticError):
    """A computation produced a non-finite value."""


class DivergenceError(NumericError):
    """A simulated trajectory left the finite range.

    ``step`` is the index of the first step whose new state is non-finite.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class TrainingAborted(NumericError):
    """Training hit a non-finite objective.

    Carries the last finite parameter vector and the history recorded so far
    so the caller can checkpoint them.
    """

    def __init__(self, message, iteration, params, history):
        super().__init__(message)
        self.iteration = iteration
        self.params = params
        self.history = history


class MissingArtifactError(AvgFlowError, FileNotFoundError):
    """A pipeline stage could not find the output of an earlier stage."""
