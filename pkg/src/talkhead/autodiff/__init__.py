from . import ops
from .adam import AdamState, adam_step, zero_grads
from .gradcheck import analytic_grad, gradient_check, numeric_grad
from .ops import OPS
from .tensor import Tape, Tensor, as_tensor, backward, get_tape, grad_enabled, no_grad

__all__ = [
    "AdamState", "OPS", "Tape", "Tensor", "adam_step", "analytic_grad", "as_tensor", "backward",
    "get_tape", "grad_enabled", "gradient_check", "no_grad", "numeric_grad", "ops", "zero_grads",
]
