"""Geometry of the inextensible polygon manifold.

Positions are arrays of shape ``(..., N, d)``; edge quantities have shape
``(..., N)``. Every function broadcasts over leading batch axes so that a
whole Monte Carlo sample can be advanced in one call.

The clamped ghost point ``r0`` is never part of the state. It is passed
explicitly and plays the role of ``x_0`` in all segment differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid",
    "FiberState",
    "SingularGramError",
    "segments",
    "constraint_eval",
    "constraint_gradient",
    "grad_apply",
    "grad_transpose_apply",
    "gram_matrix",
    "gram_dense",
    "gram_solve",
    "gram_logdet",
    "gram_determinant",
    "tangent_project",
    "second_derivative_form",
    "weighted_hessian_apply",
    "weighted_hessian_dense",
]

PIVOT_RTOL = 1e-14


class SingularGramError(np.linalg.LinAlgError):
    """Raised when a Gram pivot vanishes, i.e. the state is far from the manifold."""

    def __init__(self, index: int, pivot: float):
        super().__init__(f"Gram matrix pivot {index} is {pivot:.3e}")
        self.index = index
        self.pivot = pivot


@dataclass(frozen=True)
class Grid:
    """Staggered grid for a fiber clamped at s=0 and free at s=ell."""

    N: int
    ell: float = 1.0
    dim: int = 2

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if not self.ell > 0:
            raise ValueError("ell must be positive")

    @property
    def delta_s(self) -> float:
        return self.ell / (self.N + 1)

    @property
    def nodes(self) -> np.ndarray:
        """Arc-length coordinates s_i = (i + 1/2) ds of the dynamic nodes."""
        return (np.arange(1, self.N + 1) + 0.5) * self.delta_s

    @classmethod
    def from_spacing(cls, delta_s: float, ell: float = 1.0, dim: int = 2) -> "Grid":
        N = int(round(ell / delta_s)) - 1
        if not np.isclose((N + 1) * delta_s, ell):
            raise ValueError(f"ell={ell} is not a multiple of delta_s={delta_s}")
        return cls(N=N, ell=ell, dim=dim)


@dataclass(frozen=True)
class FiberState:
    """Node positions and velocities, each of shape ``(..., N, d)``."""

    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.shape(self.r) != np.shape(self.v):
            raise ValueError(f"shape mismatch: r {np.shape(self.r)} vs v {np.shape(self.v)}")

    @property
    def shape(self):
        return np.shape(self.r)


def _check(grid: Grid, r0, r):
    r = np.asarray(r, dtype=float)
    r0 = np.asarray(r0, dtype=float)
    if r.shape[-2:] != (grid.N, grid.dim):
        raise ValueError(f"expected positions of shape (..., {grid.N}, {grid.dim}), got {r.shape}")
    if r0.shape != (grid.dim,):
        raise ValueError(f"clamp point must have shape ({grid.dim},), got {r0.shape}")
    return r0, r


def segments(grid: Grid, r0, r) -> np.ndarray:
    """Segment vectors x_i - x_{i-1}, i = 1..N, with x_0 = r0."""
    r0, r = _check(grid, r0, r)
    prev = np.concatenate([np.broadcast_to(r0, r.shape[:-2] + (1, grid.dim)), r[..., :-1, :]], axis=-2)
    return r - prev


def constraint_eval(grid: Grid, r0, r) -> np.ndarray:
    d = segments(grid, r0, r)
    return 0.5 * (1.0 - np.einsum("...ij,...ij->...i", d, d) / grid.delta_s**2)


def grad_apply(grid: Grid, r0, r, lam) -> np.ndarray:
    """Matrix-free product grad g(r) @ lam, returning a node field."""
    d = segments(grid, r0, r) / grid.delta_s**2
    w = d * np.asarray(lam)[..., None]
    out = -w
    out[..., :-1, :] += w[..., 1:, :]
    return out


def grad_transpose_apply(grid: Grid, r0, r, y) -> np.ndarray:
    """Matrix-free product grad g(r)^T @ y for a node field y."""
    d = segments(grid, r0, r) / grid.delta_s**2
    y = np.asarray(y, dtype=float)
    dy = y.copy()
    dy[..., 1:, :] -= y[..., :-1, :]
    return -np.einsum("...ij,...ij->...i", d, dy)


def constraint_gradient(grid: Grid, r0, r) -> np.ndarray:
    """Dense gradient, shape ``(..., d*N, N)``; column k is grad g_{k-1/2}."""
    r0, r = _check(grid, r0, r)
    cols = grad_apply(grid, r0, r[..., None, :, :], np.eye(grid.N))
    return np.swapaxes(cols.reshape(cols.shape[:-2] + (grid.N * grid.dim,)), -1, -2)


def gram_matrix(grid: Grid, r0, r):
    """Tridiagonal Gram matrix as ``(diag, off)`` with shapes (..., N), (..., N-1)."""
    d = segments(grid, r0, r)
    ds4 = grid.delta_s**4
    sq = np.einsum("...ij,...ij->...i", d, d)
    diag = 2.0 * sq / ds4
    diag[..., 0] *= 0.5
    off = -np.einsum("...ij,...ij->...i", d[..., :-1, :], d[..., 1:, :]) / ds4
    return diag, off


def gram_dense(diag, off) -> np.ndarray:
    diag = np.asarray(diag)
    n = diag.shape[-1]
    G = np.zeros(diag.shape + (n,))
    i = np.arange(n)
    G[..., i, i] = diag
    if n > 1:
        G[..., i[:-1], i[1:]] = off
        G[..., i[1:], i[:-1]] = off
    return G


def gram_solve(diag, off, b) -> np.ndarray:
    """Solve G z = b for symmetric tridiagonal G without pivoting.

    Raises SingularGramError if a pivot falls below ``1e-14 * max|G|``.
    """
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    b = np.asarray(b, dtype=float)
    n = diag.shape[-1]
    scale = np.maximum(np.max(np.abs(diag), axis=-1), 1e-300)
    if n > 1:
        scale = np.maximum(scale, np.max(np.abs(off), axis=-1))
    piv = np.empty(np.broadcast_shapes(diag.shape, b.shape))
    y = np.empty_like(piv)
    piv[..., 0] = diag[..., 0]
    y[..., 0] = b[..., 0]
    for i in range(n):
        if i > 0:
            m = off[..., i - 1] / piv[..., i - 1]
            piv[..., i] = diag[..., i] - m * off[..., i - 1]
            y[..., i] = b[..., i] - m * y[..., i - 1]
        bad = np.abs(piv[..., i]) <= PIVOT_RTOL * scale
        if np.any(bad):
            raise SingularGramError(i, float(np.min(np.abs(piv[..., i]))))
    z = np.empty_like(y)
    z[..., n - 1] = y[..., n - 1] / piv[..., n - 1]
    for i in range(n - 2, -1, -1):
        z[..., i] = (y[..., i] - off[..., i] * z[..., i + 1]) / piv[..., i]
    return z


def gram_logdet(grid: Grid, r0, r) -> np.ndarray:
    """log det G(r) via the three-term recursion on the normalized matrix.

    Rows and columns are divided by the segment-length factors so that the
    normalized diagonal is (1, 2, ..., 2) and the off-diagonal entries are
    segment cosines; the recursion is run on pivot ratios to stay in range.
    """
    d = segments(grid, r0, r)
    lengths = np.sqrt(np.einsum("...ij,...ij->...i", d, d))
    cos = np.einsum("...ij,...ij->...i", d[..., :-1, :], d[..., 1:, :]) / (lengths[..., :-1] * lengths[..., 1:])
    logdet = 2.0 * np.sum(np.log(lengths / grid.delta_s**2), axis=-1)
    q = np.ones(lengths.shape[:-1])
    logq = np.zeros_like(q)
    for k in range(1, grid.N):
        q = 2.0 - cos[..., k - 1] ** 2 / q
        logq = logq + np.log(q)
    return logdet + logq


def gram_determinant(grid: Grid, r0, r) -> np.ndarray:
    return np.exp(gram_logdet(grid, r0, r))


def tangent_project(grid: Grid, r0, r, y) -> np.ndarray:
    """P(r) y = y - grad g G^{-1} grad g^T y."""
    diag, off = gram_matrix(grid, r0, r)
    z = gram_solve(diag, off, grad_transpose_apply(grid, r0, r, y))
    return np.asarray(y, dtype=float) - grad_apply(grid, r0, r, z)


def second_derivative_form(grid: Grid, v) -> np.ndarray:
    """D^2 g(x)(v, v) = -|v_i - v_{i-1}|^2 / ds^2, with the clamp velocity zero."""
    v = np.asarray(v, dtype=float)
    dv = v.copy()
    dv[..., 1:, :] -= v[..., :-1, :]
    return -np.einsum("...ij,...ij->...i", dv, dv) / grid.delta_s**2


def weighted_hessian_apply(grid: Grid, w, y) -> np.ndarray:
    """(sum_k w_k D^2 g_k) y; the Hessians are constant because g is quadratic."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    dy = y.copy()
    dy[..., 1:, :] -= y[..., :-1, :]
    f = w[..., None] * dy
    out = -f
    out[..., :-1, :] += f[..., 1:, :]
    return out / grid.delta_s**2


def weighted_hessian_dense(grid: Grid, w) -> np.ndarray:
    """Dense ``(..., dN, dN)`` form of :func:`weighted_hessian_apply`."""
    w = np.asarray(w, dtype=float)
    N, dim = grid.N, grid.dim
    wn = np.concatenate([w[..., 1:], np.zeros(w.shape[:-1] + (1,))], axis=-1)
    L = gram_dense(w + wn, -w[..., 1:])
    L = -L / grid.delta_s**2
    out = L[..., :, None, :, None] * np.eye(dim)[:, None, :]
    return out.reshape(w.shape[:-1] + (N * dim, N * dim))
