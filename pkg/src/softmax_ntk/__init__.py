"""Two-layer softmax networks in the neural tangent kernel regime."""

__version__ = "0.1.0"

from .errors import (DomainError, EigensolverError, NonFiniteError, ShapeError,
                     SingularKernelError, SoftmaxNTKError)
from .kernel import GramMatrix, gram, gram_bruteforce, min_eigenvalue, test_kernel
from .model import Dataset, NetworkState, analytic_gradient, forward, predict_all
from .ntk_regression import couple, gamma_closed_form, gamma_step, ntk_predict
from .training import monitor_induction, symmetric_init, theory_setup, train

__all__ = [
    "Dataset", "DomainError", "EigensolverError", "GramMatrix", "NetworkState",
    "NonFiniteError", "ShapeError", "SingularKernelError", "SoftmaxNTKError",
    "analytic_gradient", "couple", "forward", "gamma_closed_form", "gamma_step", "gram",
    "gram_bruteforce", "min_eigenvalue", "monitor_induction", "ntk_predict", "predict_all",
    "symmetric_init", "test_kernel", "theory_setup", "train",
]
