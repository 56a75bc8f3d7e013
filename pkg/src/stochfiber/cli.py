"""Command-line front end.

Settings come from an INI file with sections ``[run]``, ``[model]``,
``[grid]``, ``[solver]``, ``[simulate]`` and one section per study. Command
line flags override the file, which overrides the built-in defaults. Every
command writes the fully resolved configuration next to its results.

Exit codes: 0 success, 1 solver failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    StudyConfig,
    StudyError,
    coupled_convergence_study,
    dt_ladder,
    predictor_study,
    projection_skip_study,
    strong_convergence_study,
    study_filename,
    write_rows,
)
from .geometry import Grid, constraint_eval, grad_transpose_apply
from .integrators import SCHEMES, VARIANTS, ConvergenceError, SolverOptions, simulate
from .model import FiberModel, ModelParams, no_flow, rotational_flow
from .noise import sample, trajectory_seed

log = logging.getLogger("stochfiber")

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "run": {
        "seed": "0",
        "scheme": "implicit",
        "variant": "v0",
        "skip": "1",
        "threads": "1",
        "out": "results",
        "verbosity": "1",
    },
    "model": {
        "alpha": "0.4",
        "froude": "3.0",
        "drag_nr": "0.1",
        "beta": "1e-4",
        "flow": "rotational",
        "gravity_aligned": "false",
    },
    "grid": {"N": "7", "ell": "1.0"},
    "solver": {
        "newton_tol": "1e-10",
        "newton_max_iter": "50",
        "armijo_c": "1e-4",
        "armijo_shrink": "0.5",
        "armijo_max_backtracks": "30",
    },
    "simulate": {"dt": "0.001", "steps": "100", "record_every": "1"},
    "convergence": {
        "T": "0.25",
        "kmin": "8",
        "kmax": "12",
        "ref_factor": "8",
        "samples": "100",
        "chunk": "25",
        "confidence": "0.90",
        "order_min": "0.7",
        "order_max": "1.3",
    },
    "skip-study": {
        "T": "1.0",
        "dt": "0.000244140625",
        "skips": "1,10,50,100",
        "samples": "20",
        "chunk": "20",
        "max_iters": "2",
    },
    "predictor-study": {
        "N": "20",
        "T": "0.5",
        "dt": "0.0001220703125",
        "turbulence": "1e-3,1e-1,10",
        "variants": "v0,v1,v2",
        "samples": "20",
        "chunk": "20",
        "max_spread": "1",
    },
    "coupled": {
        "T": "0.5",
        "spacings": "0.125,0.0625,0.03125",
        "ref_spacing": "0.0078125",
        "samples": "20",
        "chunk": "20",
        "confidence": "0.90",
        "order_min": "0.6",
        "order_max": "1.4",
    },
}


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------------


def _parser_with_defaults() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path=None, overrides=None) -> configparser.ConfigParser:
    """Defaults, then the file, then ``overrides`` {(section, key): value}."""
    cp = _parser_with_defaults()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        user = configparser.ConfigParser(interpolation=None)
        user.optionxform = str
        try:
            user.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in user.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in user.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
                cp.set(section, key, value)
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cp.set(section, key, str(value))
    return cp


def _get(cp, section, key, kind):
    raw = cp.get(section, key)
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        if kind is list:
            return [float(x) for x in raw.split(",") if x.strip()]
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _positive(section, key, value, allow_zero=False):
    if not (value >= 0 if allow_zero else value > 0):
        raise ConfigError(f"[{section}] {key}: must be {'nonnegative' if allow_zero else 'positive'}, got {value}")
    return value


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one command."""

    params: ModelParams
    flow: str
    N: int
    ell: float
    opts: SolverOptions
    seed: int
    scheme: str
    variant: str
    skip: int
    threads: int
    out: Path
    verbosity: int
    parser: configparser.ConfigParser

    def model(self, N=None, **changes) -> FiberModel:
        params = replace(self.params, **changes) if changes else self.params
        flow = rotational_flow() if self.flow == "rotational" else no_flow()
        return FiberModel(Grid(self.N if N is None else N, self.ell, dim=params.dim), params, flow=flow)

    def section(self, name, key, kind=float):
        return _get(self.parser, name, key, kind)


def resolve(cp: configparser.ConfigParser) -> RunConfig:
    m = {k: _get(cp, "model", k, float) for k in ("alpha", "froude", "drag_nr")}
    for k, v in m.items():
        _positive("model", k, v)
    beta = _positive("model", "beta", _get(cp, "model", "beta", float), allow_zero=True)
    flow = cp.get("model", "flow")
    if flow not in ("rotational", "none"):
        raise ConfigError(f"[model] flow: expected 'rotational' or 'none', got {flow!r}")
    gravity_aligned = _get(cp, "model", "gravity_aligned", bool)
    # the default clamp tangent already points along gravity
    e_g = (0.0, -1.0)
    tau_hat = e_g if gravity_aligned else (0.0, -1.0)
    params = ModelParams(beta=beta, e_g=e_g, tau_hat=tau_hat, **m)
    N = _get(cp, "grid", "N", int)
    if N < 1:
        raise ConfigError(f"[grid] N: must be >= 1, got {N}")
    ell = _positive("grid", "ell", _get(cp, "grid", "ell", float))
    try:
        opts = SolverOptions(
            newton_tol=_get(cp, "solver", "newton_tol", float),
            newton_max_iter=_get(cp, "solver", "newton_max_iter", int),
            armijo_c=_get(cp, "solver", "armijo_c", float),
            armijo_shrink=_get(cp, "solver", "armijo_shrink", float),
            armijo_max_backtracks=_get(cp, "solver", "armijo_max_backtracks", int),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[solver] {exc}") from None
    seed = _get(cp, "run", "seed", int)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"[run] seed: must be an unsigned 64-bit integer, got {seed}")
    scheme = cp.get("run", "scheme")
    if scheme not in SCHEMES:
        raise ConfigError(f"[run] scheme: expected one of {', '.join(SCHEMES)}, got {scheme!r}")
    variant = cp.get("run", "variant").lower()
    if variant not in VARIANTS:
        raise ConfigError(f"[run] variant: expected one of {', '.join(VARIANTS)}, got {variant!r}")
    skip = _get(cp, "run", "skip", int)
    if skip < 1:
        raise ConfigError(f"[run] skip: must be >= 1, got {skip}")
    threads = _get(cp, "run", "threads", int)
    if threads < 1:
        raise ConfigError(f"[run] threads: must be >= 1, got {threads}")
    return RunConfig(
        params=params,
        flow=flow,
        N=N,
        ell=ell,
        opts=opts,
        seed=seed,
        scheme=scheme,
        variant=variant,
        skip=skip,
        threads=threads,
        out=Path(cp.get("run", "out")),
        verbosity=_get(cp, "run", "verbosity", int),
        parser=cp,
    )


def write_resolved(cp: configparser.ConfigParser, path: Path, stamp: bool) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        if stamp:
            fh.write(f"# generated {_now()}\n")
        cp.write(fh)
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _header(args):
    lines = [f"stochfiber {__version__} {args.command}"]
    if not args.no_timestamp:
        lines.append(f"generated {_now()}")
    return lines


def _write_summary(path: Path, summary: dict, args) -> Path:
    if not args.no_timestamp:
        summary = {"generated": _now(), **summary}
    path.write_text(json.dumps(summary, indent=2, sort_keys=False) + "\n")
    return path


def _study_config(rc: RunConfig, section: str, **kw) -> StudyConfig:
    base = dict(
        params=rc.params,
        scheme=rc.scheme,
        N=rc.N,
        base_seed=rc.seed,
        variant=rc.variant,
        flow=rc.flow,
        workers=rc.threads,
        opts=rc.opts,
        samples=rc.section(section, "samples", int),
        chunk=rc.section(section, "chunk", int),
    )
    base.update(kw)
    try:
        return StudyConfig(**base)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


# --- commands ------------------------------------------------------------------


def cmd_simulate(rc: RunConfig, args) -> int:
    dt = _positive("simulate", "dt", rc.section("simulate", "dt"))
    steps = rc.section("simulate", "steps", int)
    if steps < 1:
        raise ConfigError(f"[simulate] steps: must be >= 1, got {steps}")
    every = rc.section("simulate", "record_every", int)
    if every < 0:
        raise ConfigError(f"[simulate] record_every: must be >= 0, got {every}")
    model = rc.model()
    w = sample(trajectory_seed(rc.seed, 0), steps, model.grid.N, model.grid.dim, dt)
    start = time.perf_counter()
    tr = simulate(model, rc.scheme, steps * dt, dt, w, skip_n=rc.skip, variant=rc.variant, record_every=every, opts=rc.opts)
    elapsed = time.perf_counter() - start
    rc.out.mkdir(parents=True, exist_ok=True)
    path = rc.out / study_filename("simulate", rc.scheme, rc.params.beta)
    tr.write_csv(path, header_lines=_header(args))
    fin = tr.final
    ds = model.grid.delta_s
    g = np.max(np.abs(constraint_eval(model.grid, model.r0, fin.r)))
    h = np.max(np.abs(grad_transpose_apply(model.grid, model.r0, fin.r, fin.v)))
    print(
        f"simulate: scheme={rc.scheme} steps={steps} dt={dt!r} "
        f"|r(T)|={np.sqrt(np.sum(fin.r**2) * ds):.6e} |v(T)|={np.sqrt(np.sum(fin.v**2) * ds):.6e} "
        f"max|g|={g:.2e} max|grad g^T v|={h:.2e} newton_iters={int(tr.newton_iters.sum())} -> {path}"
    )
    log.info("simulate took %.2f s", elapsed)
    if args.figures:
        from .plotting import plot_trajectory

        plot_trajectory(tr, model.r0, path.with_suffix(".png"))
    return EXIT_OK


def _band(order, lo, hi):
    return order is not None and np.isfinite(order) and lo <= order <= hi


def cmd_convergence(rc: RunConfig, args) -> int:
    sec = "convergence"
    T = _positive(sec, "T", rc.section(sec, "T"))
    kmin, kmax = rc.section(sec, "kmin", int), rc.section(sec, "kmax", int)
    if kmax < kmin:
        raise ConfigError(f"[{sec}] kmax: must be >= kmin ({kmin}), got {kmax}")
    factor = rc.section(sec, "ref_factor", int)
    if factor < 1:
        raise ConfigError(f"[{sec}] ref_factor: must be >= 1, got {factor}")
    ladder = dt_ladder(T, kmin, kmax)
    cfg = _study_config(rc, sec, T=T, ladder=ladder, dt_ref=min(ladder) / factor, confidence=rc.section(sec, "confidence"))
    try:
        cfg.check_time_ladder()
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {exc}") from None
    res = strong_convergence_study(cfg, rc.scheme)
    lo, hi = rc.section(sec, "order_min"), rc.section(sec, "order_max")
    summary = {
        "study": sec,
        "scheme": rc.scheme,
        "beta": rc.params.beta,
        "samples": cfg.samples,
        "dt": [r.dt for r in res.rows],
        "dt_ref": cfg.reference_dt,
        "order_r": res.order_r,
        "order_rv": res.order_rv,
        "half_width_r": [r.half_r for r in res.rows],
        "half_width_rv": [r.half_rv for r in res.rows],
        "band": [lo, hi],
        "pass": bool(_band(res.order_r, lo, hi) and _band(res.order_rv, lo, hi)),
    }
    return _finish_table(rc, args, sec, rc.scheme, res.rows, summary, "convergence", elapsed=res.elapsed)


def cmd_coupled(rc: RunConfig, args) -> int:
    sec = "coupled"
    T = _positive(sec, "T", rc.section(sec, "T"))
    spacings = tuple(rc.section(sec, "spacings", list))
    if not spacings:
        raise ConfigError(f"[{sec}] spacings: need at least one spacing")
    ref = _positive(sec, "ref_spacing", rc.section(sec, "ref_spacing"))
    cfg = _study_config(rc, sec, T=T, ladder=spacings, ref_spacing=ref, confidence=rc.section(sec, "confidence"))
    try:
        res = coupled_convergence_study(cfg, rc.scheme)
    except ValueError as exc:
        if isinstance(exc, (StudyError, ConvergenceError)):
            raise
        raise ConfigError(f"[{sec}] {exc}") from None
    lo, hi = rc.section(sec, "order_min"), rc.section(sec, "order_max")
    summary = {
        "study": sec,
        "scheme": rc.scheme,
        "beta": rc.params.beta,
        "samples": cfg.samples,
        "delta_s": list(spacings),
        "ref_spacing": ref,
        "order_r": res.order_r,
        "order_rv": res.order_rv,
        "half_width_r": [r.half_r for r in res.rows],
        "half_width_rv": [r.half_rv for r in res.rows],
        "band": [lo, hi],
        "pass": bool(_band(res.order_r, lo, hi) and _band(res.order_rv, lo, hi)),
    }
    return _finish_table(rc, args, sec, rc.scheme, res.rows, summary, "coupled", elapsed=res.elapsed)


def cmd_skip_study(rc: RunConfig, args) -> int:
    sec = "skip-study"
    T = _positive(sec, "T", rc.section(sec, "T"))
    dt = _positive(sec, "dt", rc.section(sec, "dt"))
    skips = [int(x) for x in rc.section(sec, "skips", list)]
    if not skips or min(skips) < 1:
        raise ConfigError(f"[{sec}] skips: need positive integers")
    cfg = _study_config(rc, sec, T=T, ladder=(dt,))
    start = time.perf_counter()
    try:
        rows = projection_skip_study(cfg, skips)
    except ValueError as exc:
        if isinstance(exc, (StudyError, ConvergenceError)):
            raise
        raise ConfigError(f"[{sec}] {exc}") from None
    max_iters = rc.section(sec, "max_iters")
    cons = [r.constraint_err for r in rows]
    tang = [r.tangency_err for r in rows]
    summary = {
        "study": sec,
        "scheme": "explicit",
        "beta": rc.params.beta,
        "samples": cfg.samples,
        "dt": dt,
        "n": [r.n for r in rows],
        "projection_iters": [r.projection_iters for r in rows],
        "max_iters": max_iters,
        "pass": bool(
            all(a <= b for a, b in zip(cons, cons[1:]))
            and all(a <= b for a, b in zip(tang, tang[1:]))
            and all(r.projection_iters < max_iters for r in rows)
        ),
    }
    return _finish_table(rc, args, sec, "explicit", rows, summary, "skip", elapsed=time.perf_counter() - start)


def cmd_predictor_study(rc: RunConfig, args) -> int:
    sec = "predictor-study"
    N = rc.section(sec, "N", int)
    if N < 1:
        raise ConfigError(f"[{sec}] N: must be >= 1, got {N}")
    T = _positive(sec, "T", rc.section(sec, "T"))
    dt = _positive(sec, "dt", rc.section(sec, "dt"))
    turbulence = rc.section(sec, "turbulence", list)
    variants = [v.strip().lower() for v in rc.parser.get(sec, "variants").split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise ConfigError(f"[{sec}] variants: expected a subset of {', '.join(VARIANTS)}, got {bad or variants}")
    if not turbulence or min(turbulence) < 0:
        raise ConfigError(f"[{sec}] turbulence: need nonnegative values")
    cfg = _study_config(rc, sec, N=N, T=T, ladder=(dt,))
    start = time.perf_counter()
    try:
        rows = predictor_study(cfg, variants, turbulence)
    except ValueError as exc:
        if isinstance(exc, (StudyError, ConvergenceError)):
            raise
        raise ConfigError(f"[{sec}] {exc}") from None
    by = {v: [r.newton_iters for r in rows if r.variant == v] for v in variants}
    spread = {v: float(max(x) - min(x)) for v, x in by.items()}
    smallest = [r for r in rows if r.turbulence == min(turbulence)]
    it = {r.variant: r.newton_iters for r in smallest}
    checks = {}
    if "v0" in it and "v1" in it:
        checks["v1_le_v0_at_smallest"] = bool(it["v1"] <= it["v0"])
    if "v2" in spread:
        checks["v2_spread_below"] = bool(spread["v2"] < rc.section(sec, "max_spread"))
    summary = {
        "study": sec,
        "scheme": "implicit",
        "samples": cfg.samples,
        "N": N,
        "dt": dt,
        "turbulence": list(turbulence),
        "mean_newton_iters": by,
        "spread": spread,
        "checks": checks,
        "pass": bool(all(checks.values())),
    }
    return _finish_table(rc, args, sec, "implicit", rows, summary, "predictor", beta_token="sweep",
                         elapsed=time.perf_counter() - start)


def _fmt(order):
    return "n/a" if order is None else f"{order:.3f}"


def _finish_table(rc, args, section, scheme, rows, summary, study, elapsed, beta_token=None):
    rc.out.mkdir(parents=True, exist_ok=True)
    name = study_filename(study, scheme, rc.params.beta) if beta_token is None else f"{study}_{scheme}_{beta_token}.csv"
    path = write_rows(rc.out / name, rows, _header(args))
    spath = _write_summary(path.with_suffix(".json"), summary, args)
    if args.figures:
        from . import plotting

        fig = path.with_suffix(".png")
        if study in ("convergence", "coupled"):
            plotting.plot_convergence(rows, fig, xlabel="dt = ds" if study == "coupled" else "dt")
        elif study == "skip":
            plotting.plot_skip(rows, fig)
        else:
            plotting.plot_predictor(rows, fig)
    status = "PASS" if summary.get("pass") else "FAIL"
    extra = ""
    if "order_r" in summary:
        extra = f" order_r={_fmt(summary['order_r'])} order_rv={_fmt(summary['order_rv'])}"
    print(f"{section}: {status}{extra} -> {path} ({elapsed:.1f} s)")
    print(f"summary: {spath}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "convergence": cmd_convergence,
    "skip-study": cmd_skip_study,
    "predictor-study": cmd_predictor_study,
    "coupled": cmd_coupled,
}


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--scheme", choices=SCHEMES)
    common.add_argument("--variant", choices=VARIANTS, help="Newton predictor for the implicit scheme")
    common.add_argument("--skip", type=int, help="project every n-th step (explicit scheme)")
    common.add_argument("--threads", type=int, help="worker processes for sample chunks (default 1)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--no-timestamp", action="store_true", help="omit generation timestamps")
    common.add_argument("--figures", action="store_true", help="also render PNG figures next to the CSV")
    common.add_argument("--beta", type=float, help="turbulence intensity")
    common.add_argument("--samples", type=int, help="Monte Carlo sample count of a study")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="stochfiber", description="Stochastic inextensible fiber simulations and studies.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="run one trajectory and write it as CSV")
    s.add_argument("--flow", choices=("rotational", "none"))
    s.add_argument("--gravity-aligned", action="store_true", help="clamp tangent along gravity")
    s.add_argument("--steps", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--N", type=int, dest="N", help="number of dynamic nodes")
    sub.add_parser("convergence", parents=[common], help="strong order in dt")
    sub.add_parser("skip-study", parents=[common], help="projection skipping in the explicit scheme")
    sub.add_parser("predictor-study", parents=[common], help="Newton predictors for the implicit scheme")
    sub.add_parser("coupled", parents=[common], help="space-time refinement with dt = ds")
    return p


def _overrides(args) -> dict:
    o = {
        ("run", "seed"): args.seed,
        ("run", "scheme"): args.scheme,
        ("run", "variant"): args.variant,
        ("run", "skip"): args.skip,
        ("run", "threads"): args.threads,
        ("run", "out"): args.out,
        ("model", "beta"): args.beta,
    }
    if args.samples is not None:
        section = {"simulate": None}.get(args.command, args.command)
        if section is not None:
            o[(section, "samples")] = args.samples
    if args.command == "simulate":
        o[("model", "flow")] = args.flow
        o[("simulate", "steps")] = args.steps
        o[("simulate", "dt")] = args.dt
        o[("grid", "N")] = args.N
        if args.gravity_aligned:
            o[("model", "gravity_aligned")] = "true"
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cp = load_config(args.config, _overrides(args))
        rc = resolve(cp)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    level = logging.WARNING if args.quiet else (logging.INFO if args.verbose or rc.verbosity > 1 else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    write_resolved(cp, rc.out / f"{args.command}_config.ini", stamp=not args.no_timestamp)
    try:
        return COMMANDS[args.command](rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, StudyError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
