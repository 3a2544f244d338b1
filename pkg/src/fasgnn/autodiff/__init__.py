"""Reverse-mode automatic differentiation over complex numpy arrays."""
from . import ops
from .gradcheck import GradCheckReport, PRIMITIVE_CASES, check_primitive, grad_check
from .tensor import Gradients, Record, Tape, Tensor, as_tensor, backward, current_tape

__all__ = [
    "ops", "Tensor", "Tape", "Record", "Gradients", "backward", "as_tensor", "current_tape",
    "grad_check", "check_primitive", "GradCheckReport", "PRIMITIVE_CASES",
]
