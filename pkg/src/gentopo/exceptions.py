"""Exception hierarchy shared across the package."""


class GentopoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GentopoError, ValueError):
    """Arrays or parameters with the wrong shape, range or type."""


class IllPosedProblemError(GentopoError):
    """The boundary conditions leave rigid-body motion unconstrained."""


class SolverError(GentopoError):
    """The iterative solver did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InfeasibleVolumeError(GentopoError):
    """The volume target cannot be met within the move limits."""


class InvalidConfigurationError(GentopoError, ValueError):
    """A model variant was requested without the inputs it needs."""


class TrainingDivergedError(GentopoError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class InvalidBaselineError(GentopoError, ValueError):
    """Compliance baseline is not strictly positive."""


class EmptySplitError(GentopoError):
    """No records survive the task-split filter."""


class DatasetError(GentopoError):
    """Malformed or invalid dataset files."""
