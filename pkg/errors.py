"""Exception hierarchy shared by the library and the command-line driver."""


class WorklocError(Exception):
    """Base class for all workloc failures."""

    exit_code = 1


class DatasetValidationError(WorklocError, ValueError):
    """Malformed or inconsistent input data (schema, dimensions, references, ranges)."""

    exit_code = 2


class NumericalError(WorklocError, ArithmeticError):
    """A computation produced a non-finite or degenerate result."""

    exit_code = 3


class LineSearchError(NumericalError):
    """Backtracking could not find an acceptable step; carries the last iterate."""

    def __init__(self, message: str, x=None, fun: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.x = x
        self.fun = fun
        self.iterations = iterations


class HessianError(NumericalError):
    """The log-likelihood Hessian is not negative definite at the supplied point."""


class IncompatibleModelsError(DatasetValidationError):
    """Models (or a model and a dataset) were built from different data."""
