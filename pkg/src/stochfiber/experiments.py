"""Monte Carlo studies: strong order in dt, projection skipping, predictors,
and coupled space-time refinement.

Every sample j draws its Brownian table from seed ``base_seed ^ j`` on the
finest resolution of a study; coarser runs consume sums of that table, so all
resolutions of one sample see the same path. Samples are processed in chunks
whose composition does not affect the per-sample results.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .geometry import FiberState, Grid, segments
from .integrators import ConvergenceError, SCHEMES, SolverOptions, VARIANTS, simulate
from .model import FiberModel, ModelParams, no_flow, rotational_flow
from .noise import aggregate_cells, coarsen, sample_batch

__all__ = [
    "StudyConfig",
    "StudyError",
    "ConvergenceRow",
    "ConvergenceResult",
    "SkipRow",
    "PredictorRow",
    "dt_ladder",
    "l2h_norm",
    "relative_error",
    "confidence_half_width",
    "fit_order",
    "restrict",
    "strong_convergence_study",
    "coupled_convergence_study",
    "projection_skip_study",
    "predictor_study",
    "study_filename",
    "write_rows",
]

log = logging.getLogger(__name__)

REF_FACTOR = 8


def dt_ladder(T: float, kmin: int, kmax: int) -> tuple:
    """Geometric ladder T*2^-k for k = kmin..kmax, coarsest first."""
    return tuple(T * 2.0**-k for k in range(kmin, kmax + 1))


def _is_multiple(a, b) -> bool:
    q = a / b
    return abs(q - round(q)) <= 1e-9 * max(1.0, q) and round(q) >= 1


@dataclass(frozen=True)
class StudyConfig:
    """Settings shared by the studies.

    ``ladder`` holds time steps for the dt studies and grid spacings for the
    coupled study, where the step equals the spacing. ``dt_ref`` defaults to
    the finest ladder step divided by 8; ``ref_spacing`` likewise defaults to
    the finest spacing divided by 2.
    """

    params: ModelParams = field(default_factory=ModelParams)
    scheme: str = "implicit"
    N: int = 7
    T: float = 0.25
    ladder: tuple = dt_ladder(0.25, 8, 12)
    dt_ref: Optional[float] = None
    ref_spacing: Optional[float] = None
    samples: int = 100
    base_seed: int = 0
    confidence: float = 0.90
    variant: str = "v0"
    flow: str = "rotational"
    chunk: int = 25
    workers: int = 1
    opts: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme: expected one of {SCHEMES}, got {self.scheme!r}")
        if self.variant.lower() not in VARIANTS:
            raise ValueError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.flow not in ("rotational", "none"):
            raise ValueError(f"flow: expected 'rotational' or 'none', got {self.flow!r}")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if not self.ladder or any(not h > 0 for h in self.ladder):
            raise ValueError("ladder must be a nonempty sequence of positive steps")
        if self.dt_ref is not None and not self.dt_ref > 0:
            raise ValueError("dt_ref must be positive")
        if self.ref_spacing is not None and not self.ref_spacing > 0:
            raise ValueError("ref_spacing must be positive")
        object.__setattr__(self, "ladder", tuple(float(h) for h in self.ladder))

    @property
    def reference_dt(self) -> float:
        return self.dt_ref if self.dt_ref is not None else min(self.ladder) / REF_FACTOR

    @property
    def reference_spacing(self) -> float:
        return self.ref_spacing if self.ref_spacing is not None else min(self.ladder) / 2

    def model(self, N: Optional[int] = None, **overrides) -> FiberModel:
        params = replace(self.params, **overrides) if overrides else self.params
        flow = rotational_flow() if self.flow == "rotational" else no_flow()
        return FiberModel(Grid(self.N if N is None else N, dim=params.dim), params, flow=flow)

    def check_time_ladder(self):
        ref = self.reference_dt
        if not _is_multiple(self.T, ref):
            raise ValueError(f"T={self.T} is not a multiple of the reference dt {ref}")
        for h in self.ladder:
            if not _is_multiple(h, ref):
                raise ValueError(f"ladder dt {h} is not an integer multiple of the reference dt {ref}")
            if not _is_multiple(self.T, h):
                raise ValueError(f"T={self.T} is not a multiple of ladder dt {h}")


class StudyError(RuntimeError):
    """A trajectory of a study failed; carries the offending (dt, sample)."""

    def __init__(self, dt, sample, cause):
        super().__init__(f"trajectory failed at dt={dt!r}, sample={sample}: {cause}")
        self.dt = dt
        self.sample = sample


@dataclass(frozen=True)
class ConvergenceRow:
    dt: float
    err_r: float
    err_rv: float
    half_r: float
    half_rv: float
    order_r: Optional[float] = None
    order_rv: Optional[float] = None
    spacing: Optional[float] = None

    def as_dict(self):
        d = dict(dt=self.dt)
        if self.spacing is not None:
            d["delta_s"] = self.spacing
        d.update(
            err_r=self.err_r,
            half_r=self.half_r,
            err_rv=self.err_rv,
            half_rv=self.half_rv,
            order_r="" if self.order_r is None else self.order_r,
            order_rv="" if self.order_rv is None else self.order_rv,
        )
        return d


@dataclass
class ConvergenceResult:
    """Rows (coarsest first) plus per-sample errors and the reference states."""

    rows: list
    errors_r: np.ndarray
    errors_rv: np.ndarray
    reference: Optional[FiberState] = None
    elapsed: float = 0.0

    @property
    def order_r(self):
        return self.rows[0].order_r

    @property
    def order_rv(self):
        return self.rows[0].order_rv


@dataclass(frozen=True)
class SkipRow:
    n: int
    constraint_err: float
    tangency_err: float
    terminal_err: float
    terminal_err_r: float
    projection_iters: float

    def as_dict(self):
        return dict(
            n=self.n,
            constraint_err=self.constraint_err,
            tangency_err=self.tangency_err,
            terminal_err=self.terminal_err,
            terminal_err_r=self.terminal_err_r,
            projection_iters=self.projection_iters,
        )


@dataclass(frozen=True)
class PredictorRow:
    turbulence: float
    beta: float
    variant: str
    newton_iters: float

    def as_dict(self):
        return dict(turbulence=self.turbulence, beta=self.beta, variant=self.variant, newton_iters=self.newton_iters)


# --- norms and statistics ---------------------------------------------------


def l2h_norm(z, delta_s):
    """(sum_i |z_i|^2 ds)^(1/2) over the node axis (second to last)."""
    z = np.asarray(z, dtype=float)
    return np.sqrt(np.sum(z * z, axis=(-2, -1)) * delta_s)


def relative_error(z, z_ref, delta_s):
    """|z - z_ref| / |z_ref| in the discrete L2 norm."""
    z, z_ref = np.asarray(z, dtype=float), np.asarray(z_ref, dtype=float)
    if z.shape != z_ref.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_ref.shape}")
    den = l2h_norm(z_ref, delta_s)
    if np.any(den <= 0):
        raise ValueError("reference has zero norm")
    return l2h_norm(z - z_ref, delta_s) / den


def _rv(state: FiberState):
    return np.concatenate([state.r, state.v], axis=-1)


def confidence_half_width(x, level=0.90):
    """Normal-approximation half-width z * s / sqrt(n); 0 for a single sample."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < 2:
        return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0
    z = stats.norm.ppf(0.5 + level / 2)
    return z * np.std(x, axis=-1, ddof=1) / np.sqrt(n)


def fit_order(h, err) -> Optional[float]:
    """Least-squares slope of log err against log h; None below 3 points."""
    h, err = np.asarray(h, dtype=float), np.asarray(err, dtype=float)
    if h.size < 3:
        return None
    if np.any(err <= 0):
        return float("nan")
    slope, _ = np.polyfit(np.log(h), np.log(err), 1)
    return float(slope)


def _rows(ladder, errs_r, errs_rv, level, spacings=None):
    order_r = fit_order(ladder, errs_r.mean(axis=1))
    order_rv = fit_order(ladder, errs_rv.mean(axis=1))
    rows = []
    for k, h in enumerate(ladder):
        rows.append(
            ConvergenceRow(
                dt=float(h),
                err_r=float(errs_r[k].mean()),
                err_rv=float(errs_rv[k].mean()),
                half_r=float(confidence_half_width(errs_r[k], level)),
                half_rv=float(confidence_half_width(errs_rv[k], level)),
                order_r=order_r,
                order_rv=order_rv,
                spacing=None if spacings is None else float(spacings[k]),
            )
        )
    return rows


def _chunks(cfg: StudyConfig):
    for start in range(0, cfg.samples, cfg.chunk):
        yield np.arange(start, min(cfg.samples, start + cfg.chunk))


def _map_chunks(fn, cfg: StudyConfig, *args):
    """Apply ``fn(cfg, idx, *args)`` to every sample chunk, in chunk order.

    With ``cfg.workers > 1`` chunks run in a process pool; results are still
    returned in chunk order, so reductions are independent of scheduling.
    """
    chunks = list(_chunks(cfg))
    if cfg.workers == 1 or len(chunks) == 1:
        return [fn(cfg, idx, *args) for idx in chunks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(fn, cfg, idx, *args) for idx in chunks]
        return [f.result() for f in futures]


def _run(model, scheme, T, dt, noise, idx, **kw):
    try:
        return simulate(model, scheme, T, dt, noise, **kw)
    except ConvergenceError as exc:
        member = idx[exc.members[0]] if exc.members else idx[0]
        raise StudyError(dt, int(member), exc) from exc


# --- studies -----------------------------------------------------------------


def _strong_chunk(cfg, idx, scheme):
    model = cfg.model()
    ds = model.grid.delta_s
    dt_ref = cfg.reference_dt
    M_ref = int(round(cfg.T / dt_ref))
    w = sample_batch(cfg.base_seed, idx, M_ref, model.grid.N, model.grid.dim, dt_ref)
    ref = _run(model, scheme, cfg.T, dt_ref, w, idx, variant=cfg.variant, opts=cfg.opts).final
    er = np.zeros((len(cfg.ladder), len(idx)))
    erv = np.zeros_like(er)
    for k, h in enumerate(cfg.ladder):
        wk = coarsen(w, int(round(h / dt_ref)))
        fin = _run(model, scheme, cfg.T, h, wk, idx, variant=cfg.variant, opts=cfg.opts).final
        er[k] = relative_error(fin.r, ref.r, ds)
        erv[k] = relative_error(_rv(fin), _rv(ref), ds)
    log.info("%s: samples %d..%d done", scheme, idx[0], idx[-1])
    return er, erv, ref


def _collect(parts, cfg, elapsed, spacings=None):
    errs_r = np.concatenate([p[0] for p in parts], axis=1)
    errs_rv = np.concatenate([p[1] for p in parts], axis=1)
    reference = FiberState(np.concatenate([p[2].r for p in parts]), np.concatenate([p[2].v for p in parts]))
    rows = _rows(cfg.ladder, errs_r, errs_rv, cfg.confidence, spacings=spacings)
    return ConvergenceResult(rows, errs_r, errs_rv, reference, elapsed)


def strong_convergence_study(cfg: StudyConfig, scheme: Optional[str] = None) -> ConvergenceResult:
    """Mean relative terminal errors on the dt ladder against a fine-step reference.

    Both reference and ladder runs use the scheme under test on the same path.
    """
    start = time.perf_counter()
    scheme = scheme or cfg.scheme
    cfg.check_time_ladder()
    parts = _map_chunks(_strong_chunk, cfg, scheme)
    elapsed = time.perf_counter() - start
    log.info("strong convergence study (%s) took %.1f s", scheme, elapsed)
    return _collect(parts, cfg, elapsed)


def restrict(z, factor: int):
    """Average fine nodes onto a grid with ``factor`` times wider cells.

    Coarse node i is the mean of fine nodes factor*i .. factor*i + factor - 1,
    whose cell centres average to the coarse node position.
    """
    z = np.asarray(z, dtype=float)
    factor = int(factor)
    Nf = z.shape[-2]
    if factor < 1 or (Nf + 1) % factor:
        raise ValueError(f"N+1={Nf + 1} is not divisible by {factor}")
    if factor == 1:
        return z
    Nc = (Nf + 1) // factor - 1
    lead = z.shape[:-2]
    padded = np.concatenate([np.zeros(lead + (1, z.shape[-1])), z], axis=-2)
    cells = padded.reshape(lead + (Nc + 1, factor, z.shape[-1])).mean(axis=-2)
    return cells[..., 1:, :]


def _cells(spacing, ell) -> int:
    n = ell / spacing
    if abs(n - round(n)) > 1e-9 * n:
        raise ValueError(f"spacing {spacing} does not divide the fiber length {ell}")
    return int(round(n))


def _coupled_chunk(cfg, idx, scheme):
    ell = 1.0
    ref_h = cfg.reference_spacing
    n_ref = _cells(ref_h, ell)
    ref_model = cfg.model(N=n_ref - 1)
    M_ref = int(round(cfg.T / ref_h))
    w = sample_batch(cfg.base_seed, idx, M_ref, n_ref - 1, ref_model.grid.dim, ref_h)
    ref = _run(ref_model, scheme, cfg.T, ref_h, w, idx, variant=cfg.variant, opts=cfg.opts).final
    er = np.zeros((len(cfg.ladder), len(idx)))
    erv = np.zeros_like(er)
    for k, h in enumerate(cfg.ladder):
        n = _cells(h, ell)
        m = n_ref // n
        model = cfg.model(N=n - 1)
        wk = coarsen(aggregate_cells(w, m), int(round(h / ref_h)))
        fin = _run(model, scheme, cfg.T, h, wk, idx, variant=cfg.variant, opts=cfg.opts).final
        rr, rv = restrict(ref.r, m), restrict(ref.v, m)
        er[k] = relative_error(fin.r, rr, model.grid.delta_s)
        erv[k] = relative_error(_rv(fin), np.concatenate([rr, rv], axis=-1), model.grid.delta_s)
    return er, erv, ref


def coupled_convergence_study(cfg: StudyConfig, scheme: Optional[str] = None) -> ConvergenceResult:
    """Errors for dt = ds refinement against the finest grid restricted to coarse nodes.

    ``cfg.ladder`` holds the spacings. Noise is drawn on the reference grid and
    aggregated to each coarser grid.
    """
    start = time.perf_counter()
    scheme = scheme or cfg.scheme
    ref_h = cfg.reference_spacing
    n_ref = _cells(ref_h, 1.0)
    if not _is_multiple(cfg.T, ref_h):
        raise ValueError(f"T={cfg.T} is not a multiple of the reference step {ref_h}")
    for h in cfg.ladder:
        n = _cells(h, 1.0)
        if n_ref % n:
            raise ValueError(f"grid with spacing {h} is not nested in the reference grid")
        if not _is_multiple(cfg.T, h):
            raise ValueError(f"T={cfg.T} is not a multiple of step {h}")
    parts = _map_chunks(_coupled_chunk, cfg, scheme)
    elapsed = time.perf_counter() - start
    log.info("coupled convergence study (%s) took %.1f s", scheme, elapsed)
    return _collect(parts, cfg, elapsed, spacings=cfg.ladder)


class _SpaceTimeNorms:
    """Accumulates |(|d_s r|^2 - 1)| and |d_s r . d_s v| over edges and steps."""

    def __init__(self, model: FiberModel, dt):
        self.model = model
        self.dt = dt
        self.cons = 0.0
        self.tang = 0.0

    def __call__(self, step, t, state, record, stats):
        grid = self.model.grid
        ds = grid.delta_s
        d = segments(grid, self.model.r0, state.r) / ds
        v = np.asarray(state.v)
        dv = np.diff(np.concatenate([np.zeros_like(v[..., :1, :]), v], axis=-2), axis=-2) / ds
        self.cons = self.cons + np.sum((np.sum(d * d, axis=-1) - 1.0) ** 2, axis=-1) * ds * self.dt
        self.tang = self.tang + np.sum(np.sum(d * dv, axis=-1) ** 2, axis=-1) * ds * self.dt

    def result(self):
        return np.sqrt(self.cons), np.sqrt(self.tang)


def _skip_chunk(cfg, idx, runs):
    dt = cfg.ladder[0]
    model = cfg.model()
    ds = model.grid.delta_s
    M = int(round(cfg.T / dt))
    w = sample_batch(cfg.base_seed, idx, M, model.grid.N, model.grid.dim, dt)
    out = {}
    finals = {}
    for n in runs:
        acc = _SpaceTimeNorms(model, dt)
        tr = _run(model, "explicit", cfg.T, dt, w, idx, skip_n=n, callbacks=(acc,), opts=cfg.opts)
        cons, tang = acc.result()
        finals[n] = tr.final
        out[n] = [cons, tang, None, None, tr.newton_iters[..., tr.projected].ravel()]
    for n in runs:
        out[n][2] = relative_error(_rv(finals[n]), _rv(finals[1]), ds)
        out[n][3] = relative_error(finals[n].r, finals[1].r, ds)
    return out


def projection_skip_study(cfg: StudyConfig, skip_ladder: Sequence[int] = (1, 10, 50, 100)) -> list:
    """Scheme B with projections every n-th step, at the first ladder dt.

    Terminal errors are relative (r, v) and r errors against the n = 1 run.
    """
    skip_ladder = [int(n) for n in skip_ladder]
    if any(n < 1 for n in skip_ladder):
        raise ValueError("skip values must be >= 1")
    dt = cfg.ladder[0]
    if not _is_multiple(cfg.T, dt):
        raise ValueError(f"T={cfg.T} is not a multiple of dt {dt}")
    runs = sorted(set(skip_ladder) | {1})
    parts = _map_chunks(_skip_chunk, cfg, runs)
    rows = []
    for n in skip_ladder:
        cols = [np.concatenate([p[n][k] for p in parts]) for k in range(5)]
        it = cols[4]
        rows.append(
            SkipRow(
                n=n,
                constraint_err=float(cols[0].mean()),
                tangency_err=float(cols[1].mean()),
                terminal_err=float(cols[2].mean()),
                terminal_err_r=float(cols[3].mean()),
                projection_iters=float(it.mean()) if it.size else 0.0,
            )
        )
    return rows


def _predictor_chunk(cfg, idx, beta, variants):
    dt = cfg.ladder[0]
    model = cfg.model(beta=beta)
    M = int(round(cfg.T / dt))
    w = sample_batch(cfg.base_seed, idx, M, model.grid.N, model.grid.dim, dt)
    return {v: _run(model, "implicit", cfg.T, dt, w, idx, variant=v, opts=cfg.opts).newton_iters.ravel() for v in variants}


def predictor_study(
    cfg: StudyConfig,
    variants: Sequence[str] = VARIANTS,
    turbulence: Sequence[float] = (1e-3, 1e-1, 10.0),
) -> list:
    """Average scheme A Newton iterations per predictor and turbulence number.

    The turbulence number beta / sqrt(ds) sets beta on the configured grid;
    the first ladder dt is the step. All variants share each sample's path.
    """
    variants = [v.lower() for v in variants]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown predictor variant {v!r}")
    dt = cfg.ladder[0]
    if not _is_multiple(cfg.T, dt):
        raise ValueError(f"T={cfg.T} is not a multiple of dt {dt}")
    grid = Grid(cfg.N, dim=cfg.params.dim)
    rows = []
    for eff in turbulence:
        beta = float(eff) * np.sqrt(grid.delta_s)
        parts = _map_chunks(_predictor_chunk, cfg, beta, variants)
        for v in variants:
            rows.append(PredictorRow(float(eff), float(beta), v, float(np.concatenate([p[v] for p in parts]).mean())))
        log.info("predictor study: turbulence %g done", eff)
    return rows


# --- output --------------------------------------------------------------------


def study_filename(study: str, scheme: str, beta: float) -> str:
    """``<study>_<scheme>_<beta>.csv`` with beta in shortest round-trip form."""
    return f"{study}_{scheme}_{float(beta)!r}.csv"


def write_rows(path, rows, header_lines: Sequence[str] = ()) -> Path:
    """Write dataclass rows as CSV; optional ``#``-prefixed header lines come first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dicts = [r.as_dict() for r in rows]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if not dicts:
            return path
        w = csv.DictWriter(fh, fieldnames=list(dicts[0]), lineterminator="\n")
        w.writeheader()
        for d in dicts:
            w.writerow({k: (repr(x) if isinstance(x, float) else x) for k, x in d.items()})
    return path
