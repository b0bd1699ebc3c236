"""Minimal reverse-mode autodiff with nested (second-order) recording."""

from .core import (
    REGISTRY,
    AutodiffError,
    NoAdjointError,
    Primitive,
    ShapeError,
    Tensor,
    UnboundLeafError,
    apply,
    as_tensor,
    exp,
    flat,
    grad,
    is_recording,
    log,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    tanh,
    vjp,
)
from .graph import Graph

__all__ = [
    "REGISTRY",
    "AutodiffError",
    "Graph",
    "NoAdjointError",
    "Primitive",
    "ShapeError",
    "Tensor",
    "UnboundLeafError",
    "apply",
    "as_tensor",
    "exp",
    "flat",
    "grad",
    "is_recording",
    "log",
    "no_grad",
    "relu",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "tanh",
    "vjp",
]
