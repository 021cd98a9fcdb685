"""Tensor kernels, reverse-mode differentiation and gradient checking."""
from .graph import Node, Parameter, as_node, backward
from .gradcheck import grad_check, gradient_errors, relative_error
from .kernels import check_finite
from . import kernels, ops

__all__ = [
    "Node", "Parameter", "as_node", "backward", "check_finite",
    "grad_check", "gradient_errors", "relative_error", "kernels", "ops",
]
