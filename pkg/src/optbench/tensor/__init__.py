"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import ops
from .engine import Graph, GraphError, ShapeError, Tensor, backward, forward
from .gradcheck import GradCheckReport, finite_difference_check

__all__ = [
    "Graph", "GraphError", "ShapeError", "Tensor", "backward", "forward", "ops",
    "GradCheckReport", "finite_difference_check",
]
