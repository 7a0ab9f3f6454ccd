"""Double-precision tensors with reverse-mode automatic differentiation."""
from tcrdrp.core import ops
from tcrdrp.core.gradcheck import grad_check, grad_check_params
from tcrdrp.core.ops import BatchNormState
from tcrdrp.core.tensor import GradStore, ShapeError, Tape, TapeError, Tensor, as_tensor, backward

__all__ = [
    "ops", "grad_check", "grad_check_params", "BatchNormState", "GradStore",
    "ShapeError", "Tape", "TapeError", "Tensor", "as_tensor", "backward",
]
