from .core import (
    GradientError,
    NonFiniteError,
    ShapeError,
    Tensor,
    TensorError,
    as_tensor,
    default_dtype,
    finite_checks,
    get_default_dtype,
    grad_enabled,
    gradients,
    no_grad,
    set_default_dtype,
    trace,
)
from .gradcheck import GradCheckReport, check_op, grad_check
from . import ops

__all__ = [
    "GradientError", "NonFiniteError", "ShapeError", "Tensor", "TensorError",
    "as_tensor", "default_dtype", "finite_checks", "get_default_dtype",
    "grad_enabled", "gradients", "no_grad", "set_default_dtype", "trace",
    "GradCheckReport", "check_op", "grad_check", "ops",
]
