"""Exception types raised across the package."""


class HegpError(Exception):
    """Base class for all package errors."""


class ParameterError(HegpError, ValueError):
    """A parameter is outside its valid domain (non-finite, non-positive, ...)."""


class LinearAlgebraError(HegpError):
    """A matrix operation failed beyond the jitter budget."""


class ConfigError(HegpError, ValueError):
    """An invalid or inconsistent configuration document."""


class TrainingError(HegpError):
    """Training diverged or produced non-finite quantities.

    Carries the outer-loop iteration at which the failure occurred.
    """

    def __init__(self, message, iteration=None, trace=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace
