"""Reverse-mode autodiff on numpy arrays, plus finite-difference oracles."""

from .fd import (
    fd_jacobian,
    finite_difference_gradient,
    hvp_finite_difference,
    jacobian,
    relative_error,
    value_and_grad,
)
from .graph import (
    OP_KINDS,
    Graph,
    ShapeError,
    Tensor,
    active_graph,
    apply,
    as_tensor,
    backward,
    concat,
    custom,
)
from .optim import OptimizerConfig, OptimizerState, optimizer_update

__all__ = [
    "OP_KINDS",
    "Graph",
    "OptimizerConfig",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "active_graph",
    "apply",
    "as_tensor",
    "backward",
    "concat",
    "custom",
    "fd_jacobian",
    "finite_difference_gradient",
    "hvp_finite_difference",
    "jacobian",
    "optimizer_update",
    "relative_error",
    "value_and_grad",
]
