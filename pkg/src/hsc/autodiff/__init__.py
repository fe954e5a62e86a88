"""Reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .gradcheck import GradcheckReport, gradcheck
from .nn import Module, Parameter
from .optim import Adam, adam_step, step_decay
from .tensor import NonFiniteError, ShapeError, TapeError, Tensor, default_dtype, no_grad, precision


def primitive_forward_backward(op_kind: str, inputs, attrs=None):
    """Run a named primitive; call ``.backward`` on the result to populate grads."""
    return ops.apply(op_kind, *inputs, **(attrs or {}))


__all__ = [
    "Adam", "GradcheckReport", "Module", "NonFiniteError", "Parameter", "ShapeError",
    "TapeError", "Tensor", "adam_step", "default_dtype", "gradcheck", "no_grad", "ops",
    "precision", "primitive_forward_backward", "step_decay",
]
