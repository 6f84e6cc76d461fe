"""Exception hierarchy shared by the library and the command-line front end.

Each class carries the process exit code the CLI maps it to.
"""


class GarchLQError(Exception):
    exit_code = 1


class UsageError(GarchLQError, ValueError):
    """Bad arguments: shapes that do not agree, out-of-range settings."""

    exit_code = 1


class DataError(GarchLQError, ValueError):
    exit_code = 2


class ResourceError(GarchLQError):
    exit_code = 2


class NumericalError(GarchLQError, ArithmeticError):
    exit_code = 3


class ModelInstabilityError(NumericalError):
    """The covariance recursion has no stationary point."""


class DivergenceError(NumericalError):
    """An iteration failed to converge.

    ``trace`` holds whatever error sequence was recorded before giving up and
    ``delta_eps`` the measured damping constant when it is known.
    """

    def __init__(self, message, trace=None, delta_eps=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
        self.delta_eps = delta_eps


class OptimizationError(NumericalError):
    pass


class PreconditionError(UsageError):
    pass


class TreeShapeError(UsageError):
    pass


class VerificationError(GarchLQError):
    exit_code = 4
