"""Stochastic dynamics of inextensible elastic fibers on the polygon manifold."""

from .geometry import FiberState, Grid, SingularGramError
from .model import DragModel, FiberModel, FlowField, ModelParams, identity_drag, no_flow, rotational_flow

__version__ = "0.1.0"

__all__ = [
    "DragModel",
    "FiberModel",
    "FiberState",
    "FlowField",
    "Grid",
    "ModelParams",
    "SingularGramError",
    "identity_drag",
    "no_flow",
    "rotational_flow",
]
