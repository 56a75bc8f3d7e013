"""Drift, diffusion and explicit multiplier for the turbulence-driven fiber.

The finite-volume stencils act on an extended configuration with two ghost
nodes at each end. Ghosts are eliminated analytically; the dynamic state is
always the ``(N, d)`` block of interior nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .geometry import (
    Grid,
    grad_apply,
    grad_transpose_apply,
    gram_matrix,
    gram_solve,
    second_derivative_form,
)

__all__ = [
    "ModelParams",
    "FlowField",
    "DragModel",
    "FiberModel",
    "rotational_flow",
    "no_flow",
    "identity_drag",
    "straight_fiber",
    "extend_with_ghosts",
    "drift",
    "drift_jacobian",
    "diffusion_blocks",
    "diffusion",
    "apply_diffusion",
    "multiplier_rate",
    "explicit_drift",
    "one_sided_growth_lhs",
    "one_sided_growth_check",
    "linear_growth_constant",
]


def _unit(x, name):
    x = np.asarray(x, dtype=float)
    if not np.isclose(np.linalg.norm(x), 1.0, rtol=0, atol=1e-12):
        raise ValueError(f"{name} must be a unit vector, got norm {np.linalg.norm(x)}")
    return x


@dataclass(frozen=True)
class ModelParams:
    """Dimensionless numbers and boundary data of the fiber model."""

    alpha: float = 0.4
    froude: float = 3.0
    drag_nr: float = 0.1
    beta: float = 1e-4
    e_g: tuple = (0.0, -1.0)
    r_hat: tuple = (0.0, 0.0)
    tau_hat: tuple = (0.0, -1.0)

    def __post_init__(self):
        for name in ("alpha", "froude", "drag_nr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        _unit(self.e_g, "e_g")
        _unit(self.tau_hat, "tau_hat")
        if not len(self.e_g) == len(self.r_hat) == len(self.tau_hat):
            raise ValueError("e_g, r_hat and tau_hat must have the same dimension")

    @property
    def dim(self) -> int:
        return len(self.e_g)


@dataclass(frozen=True)
class FlowField:
    """Mean flow u(x, t). Callables must broadcast over leading axes of x.

    ``gradient`` returns du/dx with shape ``(..., d, d)``; when omitted the
    Jacobian is approximated by central differences.
    """

    velocity: Callable[[np.ndarray, float], np.ndarray]
    gradient: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    name: str = "custom"

    def __call__(self, x, t):
        return self.velocity(x, t)

    def jacobian(self, x, t):
        if self.gradient is not None:
            return self.gradient(x, t)
        x = np.asarray(x, dtype=float)
        dim = x.shape[-1]
        h = 1e-6 * (1.0 + np.abs(x))
        cols = []
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = 1.0
            hj = h[..., j : j + 1]
            cols.append((self.velocity(x + hj * e, t) - self.velocity(x - hj * e, t)) / (2 * hj))
        return np.stack(cols, axis=-1)


def rotational_flow() -> FlowField:
    """u(x) = x_2 e_1 - x_1 e_2 (planar; the third component, if any, is zero)."""

    def velocity(x, t):
        u = np.zeros_like(x)
        u[..., 0] = x[..., 1]
        u[..., 1] = -x[..., 0]
        return u

    def gradient(x, t):
        dim = x.shape[-1]
        J = np.zeros(dim * dim)
        J[1] = 1.0
        J[dim] = -1.0
        return np.broadcast_to(J.reshape(dim, dim), x.shape + (dim,))

    return FlowField(velocity, gradient, name="rotational")


def no_flow() -> FlowField:
    return FlowField(
        lambda x, t: np.zeros_like(x),
        lambda x, t: np.zeros(np.shape(x) + (np.shape(x)[-1],)),
        name="none",
    )


@dataclass(frozen=True)
class DragModel:
    """Linear drag operators C(pos, tangent, t) and D(pos, vel, tangent, t).

    Set ``constant`` when both operators ignore their arguments; the drift
    Jacobian is then assembled analytically.
    """

    C: Callable
    D: Callable
    constant: bool = False
    name: str = "custom"


def identity_drag(dim: int = 2) -> DragModel:
    eye = np.eye(dim)
    return DragModel(
        C=lambda pos, tangent, t: eye,
        D=lambda pos, vel, tangent, t: eye,
        constant=True,
        name="identity",
    )


@dataclass(frozen=True, eq=False)
class FiberModel:
    """Grid, parameters, flow and drag bundled into one immutable model."""

    grid: Grid
    params: ModelParams = field(default_factory=ModelParams)
    flow: FlowField = field(default_factory=rotational_flow)
    drag: Optional[DragModel] = None

    def __post_init__(self):
        if self.params.dim != self.grid.dim:
            raise ValueError(f"parameter dimension {self.params.dim} != grid dimension {self.grid.dim}")
        if self.drag is None:
            object.__setattr__(self, "drag", identity_drag(self.grid.dim))

    @property
    def r0(self) -> np.ndarray:
        """Fixed clamped ghost x_0 = r_hat + ds tau_hat / 2."""
        p = self.params
        return np.asarray(p.r_hat, float) + 0.5 * self.grid.delta_s * np.asarray(p.tau_hat, float)

    @property
    def r_minus1(self) -> np.ndarray:
        p = self.params
        return np.asarray(p.r_hat, float) - 0.5 * self.grid.delta_s * np.asarray(p.tau_hat, float)

    def with_params(self, **changes) -> "FiberModel":
        from dataclasses import replace

        return FiberModel(self.grid, replace(self.params, **changes), self.flow, self.drag)

    @cached_property
    def extension_matrix(self) -> np.ndarray:
        """Linear part of x -> X (indices -1..N+2), shape (N+4, N); clamp ghosts are constants."""
        N = self.grid.N
        E = np.zeros((N + 4, N))
        E[2:N + 2] = np.eye(N)
        last = np.zeros(N)
        last[N - 1] = 1.0
        prev = np.zeros(N)
        if N > 1:
            prev[N - 2] = 1.0
        E[N + 2] = 2 * last - prev
        E[N + 3] = 3 * last - 2 * prev
        return E

    @cached_property
    def bending_matrix(self) -> np.ndarray:
        """Scalar N x N matrix of the bending term's dependence on the nodes."""
        N = self.grid.N
        S = np.zeros((N, N + 4))
        for i in range(N):
            S[i, i:i + 5] = (-1.0, 4.0, -6.0, 4.0, -1.0)
        p = self.params
        return S @ self.extension_matrix / (p.alpha**2 * self.grid.delta_s**4)

    @cached_property
    def bending_jacobian(self) -> np.ndarray:
        return np.kron(self.bending_matrix, np.eye(self.grid.dim))

    @cached_property
    def edge_maps(self):
        """(Q, Mmid): node <- edge summation and edge midpoint <- node maps."""
        N = self.grid.N
        E = self.extension_matrix
        Mmid = 0.5 * (E[1:N + 2] + E[2:N + 3])
        Q = np.zeros((N, N + 1))
        Q[np.arange(N), np.arange(N)] = 1.0
        Q[np.arange(N), np.arange(1, N + 1)] = 1.0
        return Q, Mmid

    @property
    def affine_drift(self) -> bool:
        """True when the drift is affine in (r, v), so its Jacobian is constant."""
        return bool(self.drag.constant) and self.flow.name in ("rotational", "none")

    @cached_property
    def constant_drift_jacobian(self):
        if not self.affine_drift:
            raise ValueError("drift Jacobian is state dependent for this model")
        zero = np.zeros((self.grid.N, self.grid.dim))
        return _drift_jacobian(self, 0.0, zero, zero)

    @cached_property
    def edge_average(self) -> np.ndarray:
        Q, Mmid = self.edge_maps
        return Q @ Mmid


def straight_fiber(model: FiberModel, direction=None):
    """Straight on-manifold configuration leaving the clamp along ``direction``.

    Defaults to the clamp tangent; returns ``(r, v)`` with zero velocity.
    """
    p = model.params
    tau = np.asarray(p.tau_hat if direction is None else direction, float)
    s = model.grid.nodes
    r = np.asarray(p.r_hat, float) + 0.5 * model.grid.delta_s * np.asarray(p.tau_hat, float)
    r = r + (s - 0.5 * model.grid.delta_s)[:, None] * tau
    return r, np.zeros_like(r)


def extend_with_ghosts(model: FiberModel, r, v):
    """Extended positions and velocities, shape ``(..., N+4, d)``, indices -1..N+2."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    batch = r.shape[:-2]
    dim = model.grid.dim
    r_prev = r[..., -2, :] if model.grid.N > 1 else np.broadcast_to(model.r0, batch + (dim,))
    v_prev = v[..., -2, :] if model.grid.N > 1 else np.zeros(batch + (dim,))
    X = np.concatenate(
        [
            np.broadcast_to(model.r_minus1, batch + (1, dim)),
            np.broadcast_to(model.r0, batch + (1, dim)),
            r,
            (2 * r[..., -1, :] - r_prev)[..., None, :],
            (3 * r[..., -1, :] - 2 * r_prev)[..., None, :],
        ],
        axis=-2,
    )
    Y = np.concatenate(
        [
            np.zeros(batch + (2, dim)),
            v,
            (2 * v[..., -1, :] - v_prev)[..., None, :],
            (3 * v[..., -1, :] - 2 * v_prev)[..., None, :],
        ],
        axis=-2,
    )
    return X, Y


def _edges(model, X, Y):
    """Midpoints, tangents and mean velocities on edges 1/2 .. N+1/2."""
    N = model.grid.N
    lo, hi = X[..., 1:N + 2, :], X[..., 2:N + 3, :]
    mid = 0.5 * (lo + hi)
    tangent = (hi - lo) / model.grid.delta_s
    midv = 0.5 * (Y[..., 1:N + 2, :] + Y[..., 2:N + 3, :])
    return mid, tangent, midv


def _matvec(M, x):
    return np.einsum("...ij,...j->...i", M, x)


def _drag_edges(model, t, mid, tangent, midv):
    C = model.drag.C(mid, tangent, t)
    return _matvec(C, model.flow(mid, t) - midv)


def drift(model: FiberModel, t, r, v) -> np.ndarray:
    """Deterministic acceleration a(t, r, v), shape ``(..., N, d)``."""
    p, ds = model.params, model.grid.delta_s
    X, Y = extend_with_ghosts(model, r, v)
    N = model.grid.N
    c = X[..., 2:N + 2, :]
    bend = -(
        X[..., 4:N + 4, :] - 4 * X[..., 3:N + 3, :] + 6 * c - 4 * X[..., 1:N + 1, :] + X[..., 0:N, :]
    ) / (p.alpha**2 * ds**4)
    f = _drag_edges(model, t, *_edges(model, X, Y))
    drag = (f[..., :-1, :] + f[..., 1:, :]) / (2 * p.drag_nr**2)
    return bend + np.asarray(p.e_g) / p.froude**2 + drag


def _drag_term(model, t, r, v):
    X, Y = extend_with_ghosts(model, r, v)
    f = _drag_edges(model, t, *_edges(model, X, Y))
    return (f[..., :-1, :] + f[..., 1:, :]) / (2 * model.params.drag_nr**2)


def _fd_columns(fun, x, h=1e-7):
    """Central-difference Jacobian of fun w.r.t. x, both ``(..., N, d)``."""
    N, dim = x.shape[-2:]
    cols = []
    for j in range(N * dim):
        e = np.zeros(N * dim)
        e[j] = h
        e = e.reshape(N, dim)
        cols.append(((fun(x + e) - fun(x - e)) / (2 * h)).reshape(x.shape[:-2] + (N * dim,)))
    return np.stack(cols, axis=-1)


def drift_jacobian(model: FiberModel, t, r, v):
    """Jacobians (da/dr, da/dv), each of shape ``(..., dN, dN)``."""
    if model.affine_drift:
        Jr, Jv = model.constant_drift_jacobian
        batch = np.shape(r)[:-2]
        return np.broadcast_to(Jr, batch + Jr.shape), np.broadcast_to(Jv, batch + Jv.shape)
    return _drift_jacobian(model, t, r, v)


def _drift_jacobian(model, t, r, v):
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    N, dim = model.grid.N, model.grid.dim
    n = N * dim
    batch = r.shape[:-2]
    Jr = np.broadcast_to(model.bending_jacobian, batch + (n, n)).copy()
    if model.drag.constant:
        Q, Mmid = model.edge_maps
        scale = 1.0 / (2 * model.params.drag_nr**2)
        X, Y = extend_with_ghosts(model, r, v)
        mid, tangent, midv = _edges(model, X, Y)
        C = np.broadcast_to(model.drag.C(mid, tangent, t), mid.shape + (dim,))
        CG = C @ model.flow.jacobian(mid, t)
        # W[e, a, j, b] = CG[e, a, b] * Mmid[e, j], then contract edges with Q
        W = CG[..., :, :, None, :] * Mmid[:, None, :, None]
        Jr += scale * (Q @ W.reshape(batch + (N + 1, -1))).reshape(batch + (n, n))
        C0 = C[..., 0, :, :]
        Jv = -scale * (model.edge_average[:, None, :, None] * C0[..., None, :, None, :]).reshape(batch + (n, n))
    else:
        Jr += _fd_columns(lambda x: _drag_term(model, t, x, v), r)
        Jv = _fd_columns(lambda y: _drag_term(model, t, r, y), v)
    return Jr, Jv


def diffusion_blocks(model: FiberModel, t, r, v) -> np.ndarray:
    """Diagonal blocks of B, shape ``(..., N, d, d)``; off-diagonal blocks are zero."""
    p, ds = model.params, model.grid.delta_s
    X, Y = extend_with_ghosts(model, r, v)
    mid, tangent, midv = _edges(model, X, Y)
    C = model.drag.C(mid, tangent, t)
    D = model.drag.D(mid, midv, tangent, t)
    A = np.einsum("...ab,...bc->...ac", C, D)
    A = np.broadcast_to(A, mid.shape[:-1] + (model.grid.dim, model.grid.dim))
    return p.beta / (2 * np.sqrt(ds) * p.drag_nr**2) * (A[..., :-1, :, :] + A[..., 1:, :, :])


def diffusion(model: FiberModel, t, r, v) -> np.ndarray:
    """Dense block-diagonal B, shape ``(..., dN, dN)``."""
    blocks = diffusion_blocks(model, t, r, v)
    N, dim = model.grid.N, model.grid.dim
    out = np.zeros(blocks.shape[:-3] + (N, dim, N, dim))
    i = np.arange(N)
    out[..., i, :, i, :] = np.moveaxis(blocks, -3, 0) if blocks.ndim > 3 else blocks
    return out.reshape(blocks.shape[:-3] + (N * dim, N * dim))


def apply_diffusion(blocks, dw) -> np.ndarray:
    return np.einsum("...iab,...ib->...ia", blocks, dw)


def multiplier_rate(model: FiberModel, t, r, v, dw, dt) -> np.ndarray:
    """Discrete tension estimate: the multiplier increment divided by dt."""
    g, r0 = model.grid, model.r0
    a = drift(model, t, r, v)
    Bdw = apply_diffusion(diffusion_blocks(model, t, r, v), dw)
    rhs = grad_transpose_apply(g, r0, r, a * dt + Bdw) + second_derivative_form(g, v) * dt
    diag, off = gram_matrix(g, r0, r)
    return -gram_solve(diag, off, rhs) / dt


def explicit_drift(model: FiberModel, t, r, v, a=None) -> np.ndarray:
    """P(r) a - grad g G^{-1} D^2 g(v, v)."""
    g, r0 = model.grid, model.r0
    if a is None:
        a = drift(model, t, r, v)
    diag, off = gram_matrix(g, r0, r)
    z = gram_solve(diag, off, grad_transpose_apply(g, r0, r, a) + second_derivative_form(g, v))
    return a - grad_apply(g, r0, r, z)


def one_sided_growth_lhs(model: FiberModel, t, r, v) -> np.ndarray:
    """<(r, v), (v, explicit drift)> summed over all nodes."""
    f = explicit_drift(model, t, r, v)
    return np.einsum("...ij,...ij->...", r, v) + np.einsum("...ij,...ij->...", v, f)


def one_sided_growth_check(model: FiberModel, t, r, v, C_T) -> np.ndarray:
    lhs = one_sided_growth_lhs(model, t, r, v)
    rhs = C_T * (1.0 + np.einsum("...ij,...ij->...", r, r) + np.einsum("...ij,...ij->...", v, v))
    return lhs <= rhs


def linear_growth_constant(model: FiberModel, t=0.0) -> float:
    """Constant C >= 1 with |a| <= C(1 + |(x, y)|) and |B| <= C(1 + |(x, y)|).

    Exact for models whose drift is affine in (x, y), i.e. a linear flow and
    constant drag operators; raises otherwise.
    """
    if not model.drag.constant or model.flow.name not in ("rotational", "none"):
        raise ValueError("closed-form growth constant needs a linear flow and constant drag")
    N, dim = model.grid.N, model.grid.dim
    zero = np.zeros((N, dim))
    Jr, Jv = drift_jacobian(model, t, zero, zero)
    L = np.hstack([Jr, Jv])
    a0 = drift(model, t, zero, zero)
    B = diffusion(model, t, zero, zero)
    return float(max(1.0, np.linalg.norm(L, 2), np.linalg.norm(a0), np.linalg.norm(B)))
