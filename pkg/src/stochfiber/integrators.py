"""Constraint-preserving time integrators.

Scheme A (``"implicit"``) is an implicit Euler step on the constrained
formulation with a second multiplier enforcing the hidden constraint.
Scheme B (``"explicit"``) integrates the explicit form sequentially and
projects position and velocity back onto the manifold and its tangent space.

All steppers accept a single state ``(N, d)`` or a batch ``(S, N, d)``;
Newton iterations are run per batch member with independent line searches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.linalg

from .geometry import (
    FiberState,
    constraint_eval,
    constraint_gradient,
    grad_apply,
    grad_transpose_apply,
    tangent_project,
    weighted_hessian_apply,
    weighted_hessian_dense,
)
from .model import (
    FiberModel,
    apply_diffusion,
    diffusion_blocks,
    drift,
    drift_jacobian,
    explicit_drift,
    multiplier_rate,
    straight_fiber,
)
from .noise import WienerIncrements

__all__ = [
    "SolverOptions",
    "StepStats",
    "MultiplierRecord",
    "ConvergenceError",
    "Guess",
    "Trajectory",
    "VARIANTS",
    "SCHEMES",
    "implicit_residual",
    "implicit_jacobian",
    "step_implicit",
    "step_explicit",
    "project_position",
    "project_velocity",
    "predictor_guess",
    "simulate",
]

VARIANTS = ("v0", "v1", "v2")
SCHEMES = ("implicit", "explicit")
DENSE_MAX_NODES = 64


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max_backtracks: int = 30

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1 or self.armijo_max_backtracks < 0:
            raise ValueError("iteration limits must be positive")
        if not (0 < self.armijo_c < 1 and 0 < self.armijo_shrink < 1):
            raise ValueError("armijo_c and armijo_shrink must lie in (0, 1)")


@dataclass
class StepStats:
    """Per-member Newton counters of one step (arrays of the batch shape)."""

    newton_iters: np.ndarray
    final_residual: np.ndarray
    backtracks: np.ndarray
    history: list = field(default_factory=list, repr=False)


@dataclass
class MultiplierRecord:
    lam: np.ndarray
    nu: np.ndarray


class ConvergenceError(RuntimeError):
    def __init__(self, message, history=(), step=None, members=()):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.message = message
        self.history = list(history)
        self.step = step
        self.members = tuple(int(m) for m in members)


@dataclass
class Guess:
    r: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    nu: np.ndarray


def _batched(x, core_ndim):
    x = np.asarray(x, dtype=float)
    return (x[None], True) if x.ndim == core_ndim else (x, False)


class _DenseLU:
    """LU factors of a batch of dense matrices, reusable across right-hand sides."""

    def __init__(self, J):
        self.factors = [scipy.linalg.lu_factor(Jk, check_finite=False) for Jk in J]

    def __call__(self, b, members=None):
        idx = range(len(self.factors)) if members is None else members
        return np.stack([scipy.linalg.lu_solve(self.factors[k], bk, check_finite=False) for k, bk in zip(idx, b)])


class _BandedLU:
    """Banded storage on node-interleaved ordering; each solve refactors."""

    def __init__(self, J, n_nodes, block):
        self.perm = _interleave(n_nodes, block)
        self.bands = []
        for Jk in J:
            A = Jk[np.ix_(self.perm, self.perm)]
            rows, cols = np.nonzero(A)
            lo = int(np.max(rows - cols, initial=0))
            up = int(np.max(cols - rows, initial=0))
            n = A.shape[0]
            ab = np.zeros((lo + up + 1, n))
            for k in range(-lo, up + 1):
                diag = np.diagonal(A, k)
                if k >= 0:
                    ab[up - k, k:] = diag
                else:
                    ab[up - k, : n + k] = diag
            self.bands.append((lo, up, ab))

    def __call__(self, b, members=None):
        idx = range(len(self.bands)) if members is None else members
        out = np.empty_like(b)
        for i, k in enumerate(idx):
            lo, up, ab = self.bands[k]
            out[i][self.perm] = scipy.linalg.solve_banded((lo, up), ab, b[i][self.perm], check_finite=False)
        return out


def _factor(J, n_nodes, block):
    if n_nodes <= DENSE_MAX_NODES:
        return _DenseLU(J)
    return _BandedLU(J, n_nodes, block)


class _ReducedImplicit:
    """Newton linear solver for scheme A with the v' corrections eliminated.

    The position rows read (I - dt H_nu) dr - dt dv - dt Dg dnu = b_r, so dv
    follows from (dr, dnu); the other rows, multiplied by dt, form a system of
    size d*N + 2N in (dr, dlam, dnu) that is assembled directly.
    """

    def __init__(self, model, t, dt, z):
        grid, r0 = model.grid, model.r0
        N, dim = grid.N, grid.dim
        n = N * dim
        self.model, self.dt, self.n = model, dt, n
        r1, v1, lam, nu = _split_implicit(model, z)
        S = z.shape[0]
        self.r1, self.nu = r1, nu
        Ar, Av = drift_jacobian(model, t + dt, r1, v1)
        Dg = constraint_gradient(grid, r0, r1)
        DgT = np.swapaxes(Dg, -1, -2)
        Hnu = weighted_hessian_dense(grid, nu)
        P = np.eye(n) - dt * Av
        self.P = np.broadcast_to(P, (S, n, n))
        self.Dg = Dg
        A = np.zeros((S, n + 2 * N, n + 2 * N))
        A[:, :n, :n] = self.P - dt * (self.P @ Hnu) - dt * dt * (Ar + weighted_hessian_dense(grid, lam))
        A[:, :n, n:n + N] = -dt * dt * Dg
        A[:, :n, n + N:] = -dt * (self.P @ Dg)
        A[:, n:n + N, :n] = dt * DgT
        hv = weighted_hessian_apply(grid, np.eye(N), v1[..., None, :, :]).reshape(S, N, n)
        A[:, n + N:, :n] = dt * hv + DgT - dt * (DgT @ Hnu)
        A[:, n + N:, n + N:] = -dt * (DgT @ Dg)
        self.inner = _factor(A, N, (dim, 1, 1))

    def __call__(self, b, members=None):
        dt, n = self.dt, self.n
        grid, r0 = self.model.grid, self.model.r0
        sel = slice(None) if members is None else members
        N = grid.N
        b1, bv = b[:, :n], b[:, n:2 * n]
        rhs = dt * b[:, n:]
        rhs[:, :n] += np.einsum("sij,sj->si", self.P[sel], b1)
        rhs[:, n + N:] += np.einsum("sji,sj->si", self.Dg[sel], b1)
        x = self.inner(rhs, members)
        dr = x[:, :n]
        dnu = x[:, n + N:]
        shape = (len(b), N, grid.dim)
        Jr_dr = dr - dt * weighted_hessian_apply(grid, self.nu[sel], dr.reshape(shape)).reshape(len(b), n)
        dv = (Jr_dr - dt * np.einsum("sij,sj->si", self.Dg[sel], dnu) - b1) / dt
        return np.concatenate([dr, dv, x[:, n:]], axis=-1)


def _interleave(N, block):
    """Permutation from variable-major to node-major ordering.

    ``block`` lists the per-node width of each variable group, e.g. (d, d, 1, 1).
    """
    offsets = np.cumsum((0,) + tuple(w * N for w in block))
    perm = []
    for i in range(N):
        for off, w in zip(offsets, block):
            perm.extend(range(off + i * w, off + (i + 1) * w))
    return np.asarray(perm)


def _newton(residual, linearize, z0, opts, scale):
    """Damped Newton with Armijo backtracking, per batch member.

    Sufficient decrease is tested on the natural level function
    0.5 |J_k^{-1} F|^2, which is invariant under row scaling; convergence is
    judged on the scaled residual max |F / scale|. ``linearize(z, idx)``
    returns a solver ``lin(b, members=None)`` for the Jacobian at z.
    """
    z = z0.copy()
    S = z.shape[0]
    idx_all = np.arange(S)
    F = residual(z, idx_all)
    w = scale(z, idx_all)
    res = np.max(np.abs(F / w), axis=-1)
    iters = np.zeros(S, dtype=int)
    backtracks = np.zeros(S, dtype=int)
    history = [res.copy()]
    while np.any(res > opts.newton_tol):
        act = np.nonzero(res > opts.newton_tol)[0]
        if np.max(iters[act]) >= opts.newton_max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {opts.newton_max_iter} iterations "
                f"(residual {np.max(res):.3e})",
                history,
                members=act[iters[act] >= opts.newton_max_iter],
            )
        za, Fa, wa = z[act], F[act], w[act]
        lin = linearize(za, act)
        delta = lin(-Fa)
        phi0 = 0.5 * np.sum(delta**2, axis=-1)
        step = np.ones(len(act))
        pending = np.arange(len(act))
        znew, Fnew = za.copy(), Fa.copy()
        for bt in range(opts.armijo_max_backtracks + 1):
            trial = za[pending] + step[pending, None] * delta[pending]
            Ft = residual(trial, act[pending])
            finite = np.all(np.isfinite(Ft), axis=-1)
            phit = np.full(len(pending), np.inf)
            if np.any(finite):
                phit[finite] = 0.5 * np.sum(lin(Ft[finite], pending[finite]) ** 2, axis=-1)
            ok = np.isfinite(phit) & (phit <= (1.0 - 2.0 * opts.armijo_c * step[pending]) * phi0[pending])
            # a residual already at tolerance is accepted even if round-off blocks the decrease
            ok |= np.max(np.abs(Ft / wa[pending]), axis=-1) <= opts.newton_tol
            done = pending[ok]
            znew[done], Fnew[done] = trial[ok], Ft[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= opts.armijo_shrink
            backtracks[act[pending]] += 1
        else:
            raise ConvergenceError(
                f"line search failed after {opts.armijo_max_backtracks} backtracks",
                history,
                members=act[pending],
            )
        z[act], F[act] = znew, Fnew
        w[act] = scale(znew, act)
        res[act] = np.max(np.abs(Fnew / w[act]), axis=-1)
        iters[act] += 1
        history.append(res.copy())
    return z, iters, res, backtracks, history


# --- scheme A ---------------------------------------------------------------


def _split_implicit(model, z):
    N, dim = model.grid.N, model.grid.dim
    n = N * dim
    lead = z.shape[:-1]
    r = z[..., :n].reshape(lead + (N, dim))
    v = z[..., n:2 * n].reshape(lead + (N, dim))
    return r, v, z[..., 2 * n:2 * n + N], z[..., 2 * n + N:]


def _pack_implicit(r, v, lam, nu):
    lead = r.shape[:-2]
    return np.concatenate([r.reshape(lead + (-1,)), v.reshape(lead + (-1,)), lam, nu], axis=-1)


def implicit_residual(model, t, dt, r, v, Bdw, z):
    """Residual of the implicit Euler / GGL system for unknowns z = (r', v', lam, nu)."""
    grid, r0 = model.grid, model.r0
    r1, v1, lam, nu = _split_implicit(model, z)
    F1 = r1 - r - dt * (v1 + grad_apply(grid, r0, r1, nu))
    F2 = v1 - v - dt * drift(model, t + dt, r1, v1) - Bdw - dt * grad_apply(grid, r0, r1, lam)
    F3 = constraint_eval(grid, r0, r1)
    F4 = grad_transpose_apply(grid, r0, r1, v1)
    lead = z.shape[:-1]
    return np.concatenate([F1.reshape(lead + (-1,)), F2.reshape(lead + (-1,)), F3, F4], axis=-1)


def implicit_jacobian(model, t, dt, z):
    """Analytic Jacobian of :func:`implicit_residual` in variable-major ordering."""
    grid, r0 = model.grid, model.r0
    N, dim = grid.N, grid.dim
    n = N * dim
    r1, v1, lam, nu = _split_implicit(model, z)
    lead = z.shape[:-1]
    Ar, Av = drift_jacobian(model, t + dt, r1, v1)
    Dg = constraint_gradient(grid, r0, r1)
    I = np.eye(n)
    J = np.zeros(lead + (2 * n + 2 * N, 2 * n + 2 * N))
    J[..., :n, :n] = I - dt * weighted_hessian_dense(grid, nu)
    J[..., :n, n:2 * n] = -dt * I
    J[..., :n, 2 * n + N:] = -dt * Dg
    J[..., n:2 * n, :n] = -dt * Ar - dt * weighted_hessian_dense(grid, lam)
    J[..., n:2 * n, n:2 * n] = I - dt * Av
    J[..., n:2 * n, 2 * n:2 * n + N] = -dt * Dg
    DgT = np.swapaxes(Dg, -1, -2)
    J[..., 2 * n:2 * n + N, :n] = DgT
    hv = weighted_hessian_apply(grid, np.eye(N), v1[..., None, :, :])
    J[..., 2 * n + N:, :n] = hv.reshape(lead + (N, n))
    J[..., 2 * n + N:, n:2 * n] = DgT
    return J


def _implicit_linearization(model, t, dt):
    if dt > 0:
        return lambda zz, idx: _ReducedImplicit(model, t, dt, zz)
    dim = model.grid.dim
    return lambda zz, idx: _factor(implicit_jacobian(model, t, dt, zz), model.grid.N, (dim, dim, 1, 1))


def _implicit_scale(model, dt, z):
    """Row scales: momentum rows are measured against the size of their bending term."""
    N, dim = model.grid.N, model.grid.dim
    n = N * dim
    r1 = z[..., :n]
    w = np.ones(z.shape)
    w[..., n:2 * n] += dt * np.abs(r1) @ np.abs(model.bending_jacobian).T
    return w


def step_implicit(model: FiberModel, state: FiberState, t, dt, dw, opts=SolverOptions(), guess: Optional[Guess] = None):
    """One implicit Euler step with GGL stabilization.

    The diffusion coefficient is frozen at (t, r, v); the drift is evaluated
    at (t + dt, r', v'). Returns ``(state, MultiplierRecord, StepStats)``.
    """
    r, single = _batched(state.r, 2)
    v, _ = _batched(state.v, 2)
    dw, _ = _batched(dw, 2)
    N = model.grid.N
    S = r.shape[0]
    Bdw = apply_diffusion(diffusion_blocks(model, t, r, v), dw)
    if guess is None:
        z0 = _pack_implicit(r, v, np.zeros((S, N)), np.zeros((S, N)))
    else:
        g = [np.broadcast_to(_batched(x, c)[0], (S,) + np.shape(ref)[1:])
             for x, c, ref in ((guess.r, 2, r), (guess.v, 2, v), (guess.lam, 1, np.zeros((S, N))), (guess.nu, 1, np.zeros((S, N))))]
        z0 = _pack_implicit(*g)
    dim = model.grid.dim
    z, iters, res, bts, hist = _newton(
        lambda zz, idx: implicit_residual(model, t, dt, r[idx], v[idx], Bdw[idx], zz),
        _implicit_linearization(model, t, dt),
        z0,
        opts,
        lambda zz, idx: _implicit_scale(model, dt, zz),
    )
    r1, v1, lam, nu = _split_implicit(model, z)
    out = _unbatch(single, r1, v1, lam, nu, iters, res, bts)
    return FiberState(out[0], out[1]), MultiplierRecord(out[2], out[3]), StepStats(out[4], out[5], out[6], hist)


def _unbatch(single, *arrays):
    if not single:
        return arrays
    return tuple(a[0] for a in arrays)


# --- scheme B ---------------------------------------------------------------


def _projection_residual(model, r_hat, z):
    grid, r0 = model.grid, model.r0
    N, dim = grid.N, grid.dim
    lead = z.shape[:-1]
    r1 = z[..., :N * dim].reshape(lead + (N, dim))
    eta = z[..., N * dim:]
    F1 = r1 - r_hat - grad_apply(grid, r0, r1, eta)
    return np.concatenate([F1.reshape(lead + (-1,)), constraint_eval(grid, r0, r1)], axis=-1)


def _projection_jacobian(model, z):
    grid, r0 = model.grid, model.r0
    N, dim = grid.N, grid.dim
    n = N * dim
    lead = z.shape[:-1]
    r1 = z[..., :n].reshape(lead + (N, dim))
    eta = z[..., n:]
    Dg = constraint_gradient(grid, r0, r1)
    J = np.zeros(lead + (n + N, n + N))
    J[..., :n, :n] = np.eye(n) - weighted_hessian_dense(grid, eta)
    J[..., :n, n:] = -Dg
    J[..., n:, :n] = np.swapaxes(Dg, -1, -2)
    return J


def project_position(model: FiberModel, r_hat, opts=SolverOptions()):
    """Solve r = r_hat + grad g(r) eta, g(r) = 0 by Newton from (r_hat, 0).

    Returns ``(r, eta, StepStats)``.
    """
    r_hat, single = _batched(r_hat, 2)
    S = r_hat.shape[0]
    N, dim = model.grid.N, model.grid.dim
    z0 = np.concatenate([r_hat.reshape(S, -1), np.zeros((S, N))], axis=-1)
    z, iters, res, bts, hist = _newton(
        lambda zz, idx: _projection_residual(model, r_hat[idx], zz),
        lambda zz, idx: _factor(_projection_jacobian(model, zz), N, (dim, 1)),
        z0,
        opts,
        lambda zz, idx: np.ones(zz.shape),
    )
    r1 = z[:, :N * dim].reshape(S, N, dim)
    out = _unbatch(single, r1, z[:, N * dim:], iters, res, bts)
    return out[0], out[1], StepStats(out[2], out[3], out[4], hist)


def project_velocity(model: FiberModel, r, v_hat) -> np.ndarray:
    return tangent_project(model.grid, model.r0, r, v_hat)


def step_explicit(model: FiberModel, state: FiberState, t, dt, dw, opts=SolverOptions(), do_project=True):
    """Semi-implicit projected Euler step: position first, then velocity at r'."""
    r = np.asarray(state.r, dtype=float)
    v = np.asarray(state.v, dtype=float)
    r_hat = r + dt * v
    batch = r.shape[:-2]
    N = model.grid.N
    if do_project:
        r1, eta, stats = project_position(model, r_hat, opts)
    else:
        r1, eta = r_hat, np.zeros(batch + (N,))
        zeros = np.zeros(batch, dtype=int)
        stats = StepStats(zeros, np.zeros(batch), zeros.copy())
    noise = apply_diffusion(diffusion_blocks(model, t, r1, v), dw)
    v_hat = v + dt * explicit_drift(model, t, r1, v) + project_velocity(model, r1, noise)
    v1 = project_velocity(model, r1, v_hat) if do_project else v_hat
    lam = eta / dt if dt > 0 else np.zeros_like(eta)
    return FiberState(r1, v1), MultiplierRecord(lam, np.zeros_like(eta)), stats


# --- predictors and trajectories -------------------------------------------


def predictor_guess(variant: str, model: FiberModel, state: FiberState, t, dt, dw) -> Guess:
    """Initial Newton guess for scheme A.

    v0: old state with zero multipliers. v1: unprojected explicit step plus the
    explicit tension estimate. v2: old state plus the tension estimate.
    """
    variant = variant.lower()
    batch = np.shape(state.r)[:-2]
    zeros = np.zeros(batch + (model.grid.N,))
    if variant == "v0":
        return Guess(state.r, state.v, zeros, zeros)
    lam = multiplier_rate(model, t, state.r, state.v, dw, dt)
    if variant == "v1":
        pred, _, _ = step_explicit(model, state, t, dt, dw, do_project=False)
        return Guess(pred.r, pred.v, lam, zeros)
    if variant == "v2":
        return Guess(state.r, state.v, lam, zeros)
    raise ValueError(f"unknown predictor variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class Trajectory:
    """Recorded output of :func:`simulate`.

    ``r``/``v``/``lam``/``nu`` hold the states at ``steps`` (a leading sample
    axis when the noise is batched); ``newton_iters`` and ``residuals`` have
    one entry per time step. ``newton_iters`` counts the r-projection
    iterations for scheme B, zero on skipped steps. ``constraint`` is
    max_i |g_i(r)| at each recorded step.
    """

    scheme: str
    dt: float
    steps: np.ndarray
    times: np.ndarray
    r: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    newton_iters: np.ndarray
    residuals: np.ndarray
    projected: np.ndarray
    final: FiberState
    constraint: Optional[np.ndarray] = None

    def mean_newton_iters(self) -> float:
        """Average iterations over steps that ran a Newton solve."""
        it = self.newton_iters[..., self.projected]
        return float(np.mean(it)) if it.size else 0.0

    def write_csv(self, path, sample: int = 0, header_lines: Sequence[str] = ()) -> None:
        """One row per recorded step: step, t, r, v, lam, constraint, newton_iters.

        ``header_lines`` are written first, each prefixed with ``# ``.
        """
        r, v, lam = self.r, self.v, self.lam
        its = self.newton_iters
        if r.ndim == 4:
            r, v, lam, its = r[sample], v[sample], lam[sample], its[sample]
        N, dim = r.shape[-2:]
        axes = "xyz"[:dim]
        header = ["step", "t"]
        header += [f"r{i + 1}_{a}" for i in range(N) for a in axes]
        header += [f"v{i + 1}_{a}" for i in range(N) for a in axes]
        header += [f"lambda{i + 1}" for i in range(N)] + ["constraint", "newton_iters"]
        cons = self.constraint
        if cons is not None and cons.ndim == 2:
            cons = cons[sample]
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, (step, t) in enumerate(zip(self.steps, self.times)):
                row = [int(step), repr(float(t))]
                row += [repr(float(x)) for x in r[k].ravel()]
                row += [repr(float(x)) for x in v[k].ravel()]
                row += [repr(float(x)) for x in lam[k]]
                row.append(repr(float(cons[k])) if cons is not None else "")
                row.append(int(its[step - 1]))
                w.writerow(row)


def simulate(
    model: FiberModel,
    scheme: str,
    T: float,
    dt: float,
    noise: WienerIncrements,
    skip_n: int = 1,
    variant: str = "v0",
    callbacks: Sequence[Callable] = (),
    record_every: int = 0,
    opts: SolverOptions = SolverOptions(),
    state0: Optional[FiberState] = None,
) -> Trajectory:
    """Integrate on [0, T] with fixed step dt driven by ``noise``.

    ``record_every = k`` stores every k-th state; 0 stores only the final one.
    Callbacks are called as ``cb(step, t, state, record, stats)`` after each
    accepted step and must not mutate their arguments.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if variant.lower() not in VARIANTS:
        raise ValueError(f"unknown predictor variant {variant!r}")
    M = int(round(T / dt))
    if not np.isclose(M * dt, T, rtol=1e-12, atol=0):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    if not np.isclose(noise.dt, dt, rtol=1e-12, atol=0):
        raise ValueError(f"noise dt {noise.dt} does not match step {dt}")
    if noise.steps < M:
        raise ValueError(f"noise has {noise.steps} steps, need {M}")
    if noise.N != model.grid.N or noise.dim != model.grid.dim:
        raise ValueError("noise table does not match the grid")
    if skip_n < 1:
        raise ValueError("skip_n must be >= 1")
    batch = noise.data.shape[:-3]
    if state0 is None:
        r, v = straight_fiber(model)
        state0 = FiberState(np.broadcast_to(r, batch + r.shape).copy(), np.broadcast_to(v, batch + v.shape).copy())
    state = state0
    rec_steps = list(range(record_every, M + 1, record_every)) if record_every else []
    if not rec_steps or rec_steps[-1] != M:
        rec_steps.append(M)
    rec_set = set(rec_steps)
    N = model.grid.N
    rs, vs, lams, nus, cons = [], [], [], [], []
    iters = np.zeros(batch + (M,), dtype=np.int32)
    resid = np.zeros(batch + (M,))
    projected = np.ones(M, dtype=bool)
    for n in range(M):
        t = n * dt
        dw = noise.data[..., n, :, :]
        try:
            if scheme == "implicit":
                guess = predictor_guess(variant, model, state, t, dt, dw)
                state, record, stats = step_implicit(model, state, t, dt, dw, opts, guess)
            else:
                do_project = (n + 1) % skip_n == 0
                projected[n] = do_project
                state, record, stats = step_explicit(model, state, t, dt, dw, opts, do_project)
        except ConvergenceError as exc:
            raise ConvergenceError(exc.message, exc.history, step=n + 1, members=exc.members) from exc
        iters[..., n] = stats.newton_iters
        resid[..., n] = stats.final_residual
        if n + 1 in rec_set:
            rs.append(state.r)
            vs.append(state.v)
            lams.append(record.lam)
            nus.append(record.nu)
            cons.append(np.max(np.abs(constraint_eval(model.grid, model.r0, state.r)), axis=-1))
        for cb in callbacks:
            cb(n + 1, t + dt, state, record, stats)
    ax = len(batch)
    steps = np.asarray(rec_steps)
    return Trajectory(
        scheme=scheme,
        dt=dt,
        steps=steps,
        times=steps * dt,
        r=np.stack(rs, axis=ax),
        v=np.stack(vs, axis=ax),
        lam=np.stack(lams, axis=ax),
        nu=np.stack(nus, axis=ax),
        newton_iters=iters,
        residuals=resid,
        projected=projected,
        final=state,
        constraint=np.stack(cons, axis=ax),
    )
