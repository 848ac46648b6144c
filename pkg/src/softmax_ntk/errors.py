"""Exception types raised across the package."""


class SoftmaxNTKError(Exception):
    """Base class for all package errors."""


class ShapeError(SoftmaxNTKError, ValueError):
    """Array dimensions do not agree."""


class DomainError(SoftmaxNTKError, ValueError):
    """An argument falls outside an operation's precondition."""


class NonFiniteError(SoftmaxNTKError, FloatingPointError):
    """A NaN or Inf appeared in an input or in the iterated state.

    ``step`` is set when the failure happened inside an iterative loop.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SingularKernelError(SoftmaxNTKError, ArithmeticError):
    """Kernel matrix is numerically singular."""


class EigensolverError(SoftmaxNTKError, ArithmeticError):
    """Dense symmetric eigensolver failed to converge."""
