"""Optional PNG figures for study tables and trajectories (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_convergence(rows, path, title="", xlabel="dt") -> Path:
    """Log-log mean relative errors with confidence bars and an order-1 guide."""
    h = np.array([r.spacing if r.spacing is not None else r.dt for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, label in (("r", "r"), ("rv", "(r, v)")):
        err = np.array([getattr(r, f"err_{key}") for r in rows])
        half = np.array([getattr(r, f"half_{key}") for r in rows])
        order = getattr(rows[0], f"order_{key}")
        tag = f"{label}, p = {order:.2f}" if order is not None else label
        ax.errorbar(h, err, yerr=half, marker="o", capsize=3, label=tag)
    ref = np.array([r.err_r for r in rows])
    ax.loglog(h, ref[-1] * h / h[-1], "k:", label="order 1")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean relative error")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_skip(rows, path) -> Path:
    n = [r.n for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    panels = (
        ("constraint_err", "length constraint error"),
        ("tangency_err", "tangency error"),
        ("terminal_err", "terminal error vs n = 1"),
        ("projection_iters", "mean projection iterations"),
    )
    for ax, (key, label) in zip(axes.ravel(), panels):
        ax.plot(n, [getattr(r, key) for r in rows], marker="o")
        ax.set_xlabel("n")
        ax.set_title(label)
        if key != "projection_iters":
            ax.set_yscale("symlog", linthresh=1e-16)
    return _save(fig, path)


def plot_predictor(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for v in sorted({r.variant for r in rows}):
        sel = [r for r in rows if r.variant == v]
        ax.semilogx([r.turbulence for r in sel], [r.newton_iters for r in sel], marker="o", label=v.upper())
    ax.set_xlabel("beta / sqrt(ds)")
    ax.set_ylabel("mean Newton iterations")
    ax.legend()
    return _save(fig, path)


def plot_trajectory(traj, r0, path, sample: int = 0) -> Path:
    """Fiber shapes at the recorded steps."""
    r = traj.r[sample] if traj.r.ndim == 4 else traj.r
    fig, ax = plt.subplots(figsize=(4, 5))
    colors = plt.cm.viridis(np.linspace(0, 1, len(r)))
    for k, c in zip(range(len(r)), colors):
        pts = np.vstack([r0, r[k]])
        ax.plot(pts[:, 0], pts[:, 1], color=c, lw=1)
    ax.set_aspect("equal")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    return _save(fig, path)
