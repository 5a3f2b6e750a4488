"""Command line driver: solve, kernel, simulate, validate, moments.

Configuration is layered. Built-in defaults are overridden by an INI file
given with --config, which is overridden by explicit flags. Every run writes
the fully resolved configuration to config.ini in its output directory, so a
run directory doubles as its own reproduction recipe. JSON documents keep
derived numbers under "payload" (byte-identical across reruns of the same
configuration and seed) and clock facts under "meta".

Exit codes: 0 success, 1 usage or input error, 2 solver non-convergence
(outputs are still written), 3 validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .bridge import (
    BridgeConvergenceError,
    BridgeProblem,
    propagate_theta,
    solve_schrodinger_system,
)
from .cases import (
    Case,
    all_cases,
    centrifugal_case,
    degeneracy_block_check,
    gaussian_spread_case,
    moving_node_case,
    moving_node_consistency,
    nodal_contradiction_diagnostic,
    stable_node_case,
    stationary_harmonic_case,
)
from .grids import (
    Profile,
    integrate,
    make_uniform_grid,
    normalize,
    profile_from_csv,
    profile_to_csv,
)
from .kernels import (
    assemble_kernel_legs,
    chapman_kolmogorov_residual,
    default_step_count,
    harmonic_kernel,
    heat_kernel,
    kernel_from_function,
    mc_kernel_estimate,
    save_kernel,
)
from .potentials import (
    centrifugal_potential,
    free_potential,
    gaussian_case_potential,
    harmonic_potential,
    moving_node_potential,
    nodal_case_potential,
)
from .simulate import (
    load_ensemble,
    moments_from_paths,
    save_ensemble,
    simulate_paths,
    write_slice_stats_csv,
)

__all__ = ["main", "UsageError"]

_VERSION = "1.0.0"

_CASE_NAMES = ("gaussian", "harmonic", "stable_node", "centrifugal", "moving_node")
_POTENTIAL_NAMES = ("free", "harmonic", "gaussian_case", "nodal_case",
                    "centrifugal", "moving_node")
_METHODS = ("analytic", "pde", "mc")


class UsageError(Exception):
    """Bad flags, unreadable inputs, or inconsistent combinations: exit 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage problems; the contract here says 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# option tables and config resolution


@dataclass(frozen=True)
class _Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _common_tail() -> list[_Opt]:
    return [
        _Opt("out", str, None, "output directory (default runs/<command>_<name>)"),
        _Opt("workers", int, None,
             "parallel worker cap, overridden by FKBRIDGE_WORKERS "
             "(default: machine cpu count; results never depend on it)"),
    ]


_OPTIONS: dict[str, list[_Opt]] = {
    "solve": [
        _Opt("case", str, None, f"named case, one of {', '.join(_CASE_NAMES)}"),
        _Opt("rho0", str, None, "CSV profile of the starting marginal"),
        _Opt("rhoT", str, None, "CSV profile of the final marginal"),
        _Opt("potential", str, None,
             f"potential for custom marginals, one of {', '.join(_POTENTIAL_NAMES)}"),
        _Opt("gamma", float, 1.0, "barrier strength for the centrifugal potential"),
        _Opt("alpha", float, 0.5, "nodal instant for the moving-node potential"),
        _Opt("nx", int, None, "grid node count (default: the case default)"),
        _Opt("x_min", float, None, "left grid edge (forces a single component)"),
        _Opt("x_max", float, None, "right grid edge (forces a single component)"),
        _Opt("T", float, None, "horizon for named cases (default: case horizon)"),
        _Opt("t0", float, 0.0, "start time (named cases require 0)"),
        _Opt("tol", float, 1e-10, "L1 marginal residual target"),
        _Opt("max_iter", int, 500, "iteration cap for the factor fitting"),
        _Opt("slices", int, 9, "interior movie slices"),
        _Opt("steps", int, None, "propagation step count (default: auto)"),
    ] + _common_tail(),
    "kernel": [
        _Opt("potential", str, None,
             f"one of {', '.join(_POTENTIAL_NAMES)}", required=True),
        _Opt("gamma", float, 1.0, "barrier strength for the centrifugal potential"),
        _Opt("alpha", float, 0.5, "nodal instant for the moving-node potential"),
        _Opt("method", str, None, "analytic, pde, or mc", required=True),
        _Opt("tau", float, 0.5, "time span of the kernel leg"),
        _Opt("t0", float, 0.0, "start time of the leg"),
        _Opt("nx", int, None, "grid node count (default 401, centrifugal 801)"),
        _Opt("x_min", float, None, "left grid edge (default -8, centrifugal 0)"),
        _Opt("x_max", float, None, "right grid edge (default 8)"),
        _Opt("steps", int, None, "propagation step count for pde (default: auto)"),
        _Opt("y", float, 0.0, "launch point for mc"),
        _Opt("x", float, 0.0, "arrival point for mc"),
        _Opt("paths", int, 100000, "mc path count"),
        _Opt("substeps", int, 512, "mc time steps per path"),
        _Opt("seed", int, None, "mc random seed (required for mc)"),
        _Opt("domain_lo", float, None, "mc first-exit killing, lower edge"),
        _Opt("domain_hi", float, None, "mc first-exit killing, upper edge"),
    ] + _common_tail(),
    "simulate": [
        _Opt("from_run", str, None, "solve output directory to draw drift from"),
        _Opt("case", str, None, "named case with a closed drift"),
        _Opt("gamma", float, 1.0, "barrier strength for the centrifugal case"),
        _Opt("alpha", float, 0.5, "nodal instant for the moving-node case"),
        _Opt("T", float, 1.0, "horizon for case mode"),
        _Opt("paths", int, 10000, "ensemble size"),
        _Opt("dt", float, None, "time step (must divide the horizon)"),
        _Opt("steps", int, None, "step count (alternative to dt)"),
        _Opt("seed", int, None, "random seed", required=True),
        _Opt("records", int, 11, "number of recorded times, endpoints included"),
        _Opt("x_init", float, None, "point start (default: density start)"),
        _Opt("component", str, None,
             "component label for multi-component runs (neg or pos)"),
    ] + _common_tail(),
    "validate": [
        _Opt("case", str, None, f"one of {', '.join(_CASE_NAMES)}", required=True),
    ] + _common_tail(),
    "moments": [
        _Opt("ensemble", str, None, "ensemble file from simulate", required=True),
        _Opt("x0", float, None, "launch point the paths started from", required=True),
        _Opt("record", int, 1, "record index for the increment (negative: from end)"),
    ] + _common_tail(),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="fkbridge", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for command, opts in _OPTIONS.items():
        sp = sub.add_parser(command)
        sp.add_argument("--config", type=str, default=None,
                        help="INI file with a [%s] section" % command)
        for opt in opts:
            extra = "" if opt.default is None else f" (default {opt.default})"
            sp.add_argument(opt.flag, dest=opt.name, type=opt.type,
                            default=None, help=opt.help + extra)
    return parser


def _resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    table = _OPTIONS[command]
    file_vals: dict[str, str] = {}
    if args.config is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keys like T and rhoT are case sensitive
        if not cp.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        if command not in cp:
            raise UsageError(f"{args.config} has no [{command}] section")
        file_vals = dict(cp[command])
        known = {o.name for o in table}
        unknown = sorted(set(file_vals) - known)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {', '.join(unknown)}")

    cfg: dict[str, Any] = {}
    for opt in table:
        val = getattr(args, opt.name)
        if val is None and opt.name in file_vals:
            try:
                val = opt.type(file_vals[opt.name])
            except ValueError:
                raise UsageError(
                    f"config key {opt.name}: cannot parse {file_vals[opt.name]!r}")
        if val is None:
            val = opt.default
        if val is None and opt.required:
            raise UsageError(f"{command} requires {opt.flag}")
        cfg[opt.name] = val

    env = os.environ.get("FKBRIDGE_WORKERS")
    if env is not None:
        try:
            cfg["workers"] = int(env)
        except ValueError:
            raise UsageError(f"FKBRIDGE_WORKERS={env!r} is not an integer")
    elif cfg.get("workers") is None:
        cfg["workers"] = os.cpu_count() or 1
    if cfg["workers"] < 1:
        raise UsageError("workers must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    """Make a payload JSON-serializable with plain Python scalars."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _write_summary(path: Path, payload: dict, elapsed: float,
                   workers: int) -> None:
    doc = {
        "payload": _clean(payload),
        "meta": {
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": elapsed,
            "tool": f"fkbridge {_VERSION}",
            "workers": workers,
        },
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _echo_config(outdir: Path, command: str, cfg: dict[str, Any]) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp[command] = {}
    for key in sorted(cfg):
        val = cfg[key]
        if val is None:
            continue
        cp[command][key] = repr(val) if isinstance(val, float) else str(val)
    with (outdir / "config.ini").open("w") as fh:
        cp.write(fh)


def _outdir(cfg: dict[str, Any], fallback: str) -> Path:
    out = Path(cfg["out"]) if cfg["out"] is not None else Path("runs") / fallback
    out.mkdir(parents=True, exist_ok=True)
    cfg["out"] = str(out)
    return out


# ---------------------------------------------------------------------------
# shared construction


def _make_case(name: str, horizon: float | None, gamma: float,
               alpha: float) -> Case:
    if name not in _CASE_NAMES:
        raise UsageError(f"unknown case {name!r}, pick one of "
                         f"{', '.join(_CASE_NAMES)}")
    if horizon is not None and horizon <= 0.0:
        raise UsageError("T must be positive")
    try:
        if name == "gaussian":
            return gaussian_spread_case(horizon or 1.0)
        if name == "harmonic":
            return stationary_harmonic_case(horizon or 1.0)
        if name == "stable_node":
            return stable_node_case(horizon or 1.0)
        if name == "centrifugal":
            return centrifugal_case(gamma, horizon or 1.0)
        return moving_node_case(alpha, horizon or 1.0)
    except ValueError as exc:
        raise UsageError(str(exc))


def _make_potential(name: str, gamma: float, alpha: float):
    if name == "free":
        return free_potential()
    if name == "harmonic":
        return harmonic_potential()
    if name == "gaussian_case":
        return gaussian_case_potential()
    if name == "nodal_case":
        return nodal_case_potential()
    if name == "centrifugal":
        try:
            return centrifugal_potential(gamma)
        except ValueError as exc:
            raise UsageError(str(exc))
    if name == "moving_node":
        return moving_node_potential(alpha)
    raise UsageError(f"unknown potential {name!r}, pick one of "
                     f"{', '.join(_POTENTIAL_NAMES)}")


def _stable_step_count(spec, grid, t0: float, t1: float,
                       requested: int | None, lattice: int) -> int:
    """Step count on a multiple-of-lattice grid satisfying dtau*max|c| <= 0.4.

    The stiffness scan is iterated because the worst potential value can live
    between the midpoint times of a coarse lattice (the moving-node potential
    peaks right next to its nodal instant).
    """
    horizon = t1 - t0
    explicit = requested is not None
    n = requested if explicit else default_step_count(spec, grid, t0, t1)
    n = max(int(n), lattice)
    for _ in range(16):
        n = ((n + lattice - 1) // lattice) * lattice
        mids = t0 + (np.arange(n) + 0.5) * (horizon / n)
        cmax = spec.max_abs_on(grid, mids)
        if not math.isfinite(cmax):
            if explicit:
                raise UsageError("potential is singular at a midpoint time of "
                                 "this step count, change --steps")
            n += lattice
            continue
        if horizon / n * cmax <= 0.4:
            return n
        if explicit:
            need = int(math.ceil(horizon * cmax / 0.4))
            raise UsageError(f"--steps {requested} too coarse for this "
                             f"potential, need at least {need}")
        n = int(math.ceil(horizon * cmax / 0.4))
    raise UsageError("no stable step count found for this potential and grid")


# ---------------------------------------------------------------------------
# solve


def _case_components(case: Case, cfg: dict[str, Any]):
    """(label, x_lo, x_hi, n) per independently solvable piece of the line."""
    explicit = cfg["x_min"] is not None or cfg["x_max"] is not None
    if explicit:
        lo = cfg["x_min"] if cfg["x_min"] is not None else case.x_min
        hi = cfg["x_max"] if cfg["x_max"] is not None else case.x_max
        return [("all", lo, hi, cfg["nx"] or case.n_default)]
    nx = cfg["nx"] or case.n_default
    if case.name == "stable_node":
        half = (nx + 1) // 2
        return [("neg", case.x_min, case.node, half),
                ("pos", case.node, case.x_max, half)]
    if case.name == "centrifugal":
        # trim the edge where the barrier blows up; the kernel never carries
        # mass across it anyway
        h = (case.x_max - case.x_min) / (nx - 1)
        trim = case.x_min + 25.0 * h
        n = int(round((case.x_max - trim) / h)) + 1
        return [("pos", trim, case.x_max, n)]
    return [("all", case.x_min, case.x_max, nx)]


def cmd_solve(cfg: dict[str, Any]) -> int:
    started = time.perf_counter()
    if cfg["tol"] <= 0.0:
        raise UsageError("tol must be positive")
    if cfg["max_iter"] < 1:
        raise UsageError("max-iter must be at least 1")
    if cfg["slices"] < 0:
        raise UsageError("slices must be nonnegative")

    case_mode = cfg["case"] is not None
    custom_mode = cfg["rho0"] is not None or cfg["rhoT"] is not None
    if case_mode == custom_mode:
        raise UsageError("give either --case or the pair --rho0/--rhoT "
                         "with --potential")

    components = []
    if case_mode:
        if cfg["t0"] != 0.0:
            raise UsageError("named cases start at t0 = 0")
        case = _make_case(cfg["case"], cfg["T"], cfg["gamma"], cfg["alpha"])
        spec = case.potential
        t0, t1 = 0.0, case.horizon
        cfg["T"] = t1
        for label, lo, hi, n in _case_components(case, cfg):
            grid = make_uniform_grid(lo, hi, n)
            r0 = normalize(Profile(grid, case.rho(grid.nodes, t0), t0))
            rT = normalize(Profile(grid, case.rho(grid.nodes, t1), t1))
            components.append((label, grid, r0, rT, 1.0, 1.0))
        name = case.name
    else:
        if cfg["rho0"] is None or cfg["rhoT"] is None or cfg["potential"] is None:
            raise UsageError("custom mode needs --rho0, --rhoT and --potential")
        try:
            raw0 = profile_from_csv(cfg["rho0"])
            rawT = profile_from_csv(cfg["rhoT"])
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc))
        if raw0.grid != rawT.grid:
            raise UsageError("the two marginal files use different grids")
        if not rawT.time > raw0.time:
            raise UsageError("rhoT must be tagged later than rho0")
        spec = _make_potential(cfg["potential"], cfg["gamma"], cfg["alpha"])
        t0, t1 = raw0.time, rawT.time
        m0, mT = integrate(raw0), integrate(rawT)
        try:
            components = [("all", raw0.grid, normalize(raw0), normalize(rawT),
                           m0, mT)]
        except ValueError as exc:
            raise UsageError(str(exc))
        cfg["t0"], cfg["T"] = t0, t1
        cfg["nx"] = raw0.grid.n
        cfg["x_min"], cfg["x_max"] = raw0.grid.x_min, raw0.grid.x_max
        name = "custom"

    lattice = math.lcm(cfg["slices"] + 1, 2)
    slice_times = [t0 + (t1 - t0) * (k + 1) / (cfg["slices"] + 1)
                   for k in range(cfg["slices"])]

    outdir = _outdir(cfg, f"solve_{name}")
    comp_payload: dict[str, Any] = {}
    all_converged = True
    for label, grid, r0, rT, m0, mT in components:
        steps = _stable_step_count(spec, grid, t0, t1, cfg["steps"], lattice)
        try:
            full, pairs = assemble_kernel_legs(spec, grid, t0, t1,
                                               slice_times, steps)
            problem = BridgeProblem(r0, rT, full, tuple(pairs))
        except ValueError as exc:
            raise UsageError(str(exc))

        try:
            sol = solve_schrodinger_system(problem, tol=cfg["tol"],
                                           max_iter=cfg["max_iter"])
            converged = True
        except BridgeConvergenceError as exc:
            sol = exc.solution
            converged = False
        except ValueError as exc:
            raise UsageError(str(exc))
        all_converged = all_converged and converged

        movie_error = None
        try:
            propagate_theta(problem, sol)
        except ValueError as exc:
            movie_error = str(exc)

        sfx = "" if label == "all" else "_" + label
        profile_to_csv(sol.f, outdir / f"f{sfx}.csv")
        profile_to_csv(sol.g, outdir / f"g{sfx}.csv")
        slices = []
        if movie_error is None:
            for k, t in enumerate(sol.times):
                rho_name = f"rho{sfx}_{k:04d}.csv"
                drift_name = f"drift{sfx}_{k:04d}.csv"
                profile_to_csv(sol.rho[k], outdir / rho_name)
                profile_to_csv(sol.drift[k], outdir / drift_name)
                slices.append({"time": t, "rho": rho_name, "drift": drift_name})

        hist = sol.residual_history
        comp_payload[label] = {
            "grid": {"x_min": grid.x_min, "x_max": grid.x_max, "n": grid.n},
            "steps": steps,
            "converged": converged,
            "residual": sol.marginal_residual,
            "iterations": sol.iterations,
            "residual_history_tail": hist[-8:],
            "input_mass_0": m0,
            "input_mass_T": mT,
            "kernel_clamped": full.clamped,
            "files": {"f": f"f{sfx}.csv", "g": f"g{sfx}.csv"},
            "slices": slices,
            "movie_error": movie_error,
        }

    payload = {
        "command": "solve",
        "case": name,
        "potential": spec.kind,
        "t0": t0,
        "t1": t1,
        "tol": cfg["tol"],
        "max_iter": cfg["max_iter"],
        "components": comp_payload,
        "all_converged": all_converged,
    }
    _echo_config(outdir, "solve", cfg)
    _write_summary(outdir / "summary.json", payload,
                   time.perf_counter() - started, cfg["workers"])
    if not all_converged:
        print(f"solve: no convergence, residuals "
              f"{[c['residual'] for c in comp_payload.values()]} "
              f"(outputs in {outdir})", file=sys.stderr)
        return 2
    print(f"solve: ok, outputs in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# kernel


def cmd_kernel(cfg: dict[str, Any]) -> int:
    started = time.perf_counter()
    if cfg["method"] not in _METHODS:
        raise UsageError(f"unknown method {cfg['method']!r}, pick one of "
                         f"{', '.join(_METHODS)}")
    if cfg["tau"] <= 0.0:
        raise UsageError("tau must be positive")
    spec = _make_potential(cfg["potential"], cfg["gamma"], cfg["alpha"])
    t0 = cfg["t0"]
    t1 = t0 + cfg["tau"]

    lo = cfg["x_min"] if cfg["x_min"] is not None else (
        0.0 if cfg["potential"] == "centrifugal" else -8.0)
    hi = cfg["x_max"] if cfg["x_max"] is not None else 8.0
    n = cfg["nx"] or (801 if cfg["potential"] == "centrifugal" else 401)
    grid = make_uniform_grid(lo, hi, n)
    span = hi - lo
    margin = min(6.0 * math.sqrt(2.0 * cfg["tau"]), 0.25 * span)

    outdir = _outdir(cfg, f"kernel_{cfg['potential']}_{cfg['method']}")
    payload: dict[str, Any] = {
        "command": "kernel",
        "potential": cfg["potential"],
        "method": cfg["method"],
        "t0": t0,
        "t1": t1,
        "grid": {"x_min": lo, "x_max": hi, "n": n},
    }

    if cfg["method"] == "mc":
        if cfg["seed"] is None:
            raise UsageError("mc needs --seed")
        domain = None
        if (cfg["domain_lo"] is None) != (cfg["domain_hi"] is None):
            raise UsageError("give both --domain-lo and --domain-hi or neither")
        if cfg["domain_lo"] is not None:
            domain = (cfg["domain_lo"], cfg["domain_hi"])
        try:
            est = mc_kernel_estimate(spec, cfg["y"], cfg["x"], t0, t1,
                                     cfg["paths"], cfg["substeps"],
                                     cfg["seed"], domain)
        except ValueError as exc:
            raise UsageError(str(exc))
        payload.update({
            "y": cfg["y"], "x": cfg["x"],
            "paths": cfg["paths"], "substeps": cfg["substeps"],
            "seed": cfg["seed"],
            "mean": est.mean, "std_error": est.std_error,
            "n_excluded": est.n_excluded,
        })
        _echo_config(outdir, "kernel", cfg)
        _write_summary(outdir / "summary.json", payload,
                       time.perf_counter() - started, cfg["workers"])
        print(f"kernel: mc estimate {est.mean:.6g} +- {est.std_error:.2g} "
              f"({est.n_excluded} of {est.n_paths} paths excluded), "
              f"outputs in {outdir}")
        return 0

    if cfg["method"] == "analytic":
        closed = {"free": heat_kernel, "harmonic": harmonic_kernel}.get(
            cfg["potential"])
        if closed is None:
            raise UsageError(f"no closed kernel for {cfg['potential']!r}, "
                             "use pde or mc")
        kern = kernel_from_function(grid, t0, t1, closed)
        tm = 0.5 * (t0 + t1)
        ck = chapman_kolmogorov_residual(
            kernel_from_function(grid, t0, tm, closed),
            kernel_from_function(grid, tm, t1, closed),
            kern, edge_margin=margin)
        steps = None
    else:
        try:
            steps = _stable_step_count(spec, grid, t0, t1, cfg["steps"], 2)
            kern, pairs = assemble_kernel_legs(spec, grid, t0, t1,
                                               [t0 + cfg["tau"] / 2.0], steps)
        except ValueError as exc:
            # singular-on-grid potentials land here with a message pointing
            # at domain splitting and the Monte Carlo estimator
            raise UsageError(str(exc))
        _, k0m, kmt = pairs[0]
        ck = chapman_kolmogorov_residual(k0m, kmt, kern, edge_margin=margin)

    save_kernel(kern, outdir / "kernel.fkk")
    payload.update({
        "steps": steps,
        "kernel_file": "kernel.fkk",
        "ck_residual": ck,
        "ck_edge_margin": margin,
        "clamped": kern.clamped,
    })
    _echo_config(outdir, "kernel", cfg)
    _write_summary(outdir / "summary.json", payload,
                   time.perf_counter() - started, cfg["workers"])
    print(f"kernel: written, Chapman-Kolmogorov residual {ck:.3g}, "
          f"outputs in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# simulate


_SIM_GRIDS = {
    # label: (x_lo, x_hi, n, domain); one-sided cases run on the positive
    # component, the barrier edge is handled by domain absorption
    "gaussian": (-8.0, 8.0, 401, None),
    "harmonic": (-8.0, 8.0, 401, None),
    "stable_node": (0.04, 8.0, 200, (0.0, 8.0)),
    "centrifugal": (0.1, 8.0, 791, (0.0, 8.0)),
}


def _drift_from_run(run_dir: Path, component: str | None):
    summary = run_dir / "summary.json"
    if not summary.is_file():
        raise UsageError(f"{run_dir} has no summary.json (expected a solve "
                         "output directory)")
    doc = json.loads(summary.read_text())
    comps = doc.get("payload", {}).get("components", {})
    if not comps:
        raise UsageError(f"{summary} lists no components")
    if component is None:
        if len(comps) > 1:
            raise UsageError(f"run has components {', '.join(sorted(comps))}, "
                             "pick one with --component")
        component = next(iter(comps))
    elif component not in comps:
        raise UsageError(f"run has no component {component!r}")
    sfx = "" if component == "all" else "_" + component
    files = sorted(run_dir.glob(f"drift{sfx}_[0-9][0-9][0-9][0-9].csv"))
    if len(files) < 2:
        raise UsageError(f"{run_dir} has fewer than two drift{sfx}_*.csv files")
    drifts = sorted((profile_from_csv(p) for p in files), key=lambda p: p.time)
    rho_file = run_dir / f"rho{sfx}_0000.csv"
    rho0 = profile_from_csv(rho_file) if rho_file.is_file() else None
    return drifts, rho0, component


def cmd_simulate(cfg: dict[str, Any]) -> int:
    started = time.perf_counter()
    if (cfg["from_run"] is None) == (cfg["case"] is None):
        raise UsageError("give exactly one of --from-run or --case")
    if cfg["records"] < 2:
        raise UsageError("records must be at least 2")

    rho_init = None
    domain = None
    source: dict[str, Any]
    if cfg["from_run"] is not None:
        drifts, rho_init, component = _drift_from_run(Path(cfg["from_run"]),
                                                      cfg["component"])
        cfg["component"] = component
        source = {"from_run": cfg["from_run"], "component": component}
    else:
        case = _make_case(cfg["case"], cfg["T"], cfg["gamma"], cfg["alpha"])
        if case.drift is None:
            raise UsageError(f"case {case.name} has no closed drift; solve it "
                             "first and use --from-run")
        lo, hi, n, domain = _SIM_GRIDS[case.name]
        grid = make_uniform_grid(lo, hi, n)
        stationary = case.name in ("harmonic", "centrifugal")
        tab_times = ([0.0, case.horizon] if stationary
                     else np.linspace(0.0, case.horizon, 21))
        drifts = [Profile(grid, case.drift(grid.nodes, float(t)), float(t))
                  for t in tab_times]
        if cfg["x_init"] is None:
            rho_init = normalize(Profile(grid, case.rho(grid.nodes, 0.0), 0.0))
        source = {"case": case.name}

    t0, t1 = drifts[0].time, drifts[-1].time
    horizon = t1 - t0
    if cfg["steps"] is not None:
        n_steps = cfg["steps"]
    elif cfg["dt"] is not None:
        if cfg["dt"] <= 0.0:
            raise UsageError("dt must be positive")
        n_steps = int(round(horizon / cfg["dt"]))
        if abs(n_steps * cfg["dt"] - horizon) > 1e-9 * max(1.0, horizon):
            raise UsageError(f"dt={cfg['dt']} does not divide the horizon "
                             f"{horizon}")
    else:
        n_steps = max(100, int(math.ceil(400.0 * horizon)))
    dt = horizon / n_steps
    ks = sorted({int(round(j * n_steps / (cfg["records"] - 1)))
                 for j in range(cfg["records"])})
    record_times = [t0 + k * dt for k in ks]

    if cfg["x_init"] is not None:
        init_kwargs = {"x_init": cfg["x_init"]}
    elif rho_init is not None:
        init_kwargs = {"rho_init": rho_init}
    else:
        raise UsageError("the run provides no initial density, give --x-init")

    try:
        ens = simulate_paths(drifts, cfg["paths"], cfg["seed"],
                             n_steps=n_steps, record_times=record_times,
                             domain=domain, **init_kwargs)
    except ValueError as exc:
        raise UsageError(str(exc))

    outdir = _outdir(cfg, "simulate_" + (cfg["case"] or
                                         Path(cfg["from_run"]).name))
    save_ensemble(ens, outdir / "ensemble.fke")
    write_slice_stats_csv(ens, outdir / "slice_stats.csv")

    records = []
    for r in range(len(ens.times)):
        s = ens.samples_at(r)
        records.append({
            "time": float(ens.times[r]),
            "n_valid": int(s.size),
            "mean": float(s.mean()) if s.size else None,
            "variance": float(s.var(ddof=1)) if s.size >= 2 else None,
        })
    payload = {
        "command": "simulate",
        "source": source,
        "n_paths": ens.n_paths,
        "n_steps": n_steps,
        "dt": dt,
        "seed": cfg["seed"],
        "n_absorbed": ens.n_absorbed,
        "n_flagged": ens.n_flagged,
        "records": records,
        "final_time": records[-1]["time"],
        "final_mean": records[-1]["mean"],
        "final_variance": records[-1]["variance"],
        "files": {"ensemble": "ensemble.fke", "slice_stats": "slice_stats.csv"},
    }
    _echo_config(outdir, "simulate", cfg)
    _write_summary(outdir / "summary.json", payload,
                   time.perf_counter() - started, cfg["workers"])
    print(f"simulate: {ens.n_paths} paths, final variance "
          f"{payload['final_variance']:.6g}, outputs in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# moments


def cmd_moments(cfg: dict[str, Any]) -> int:
    started = time.perf_counter()
    try:
        ens = load_ensemble(cfg["ensemble"])
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    r = cfg["record"]
    if r < 0:
        r += len(ens.times)
    if not 0 <= r < len(ens.times):
        raise UsageError(f"record {cfg['record']} out of range, the ensemble "
                         f"has {len(ens.times)} records")
    delta = float(ens.times[r] - ens.times[0])
    if delta <= 0.0:
        raise UsageError("the increment needs a record later than the start")
    samples = ens.samples_at(r)
    try:
        pm = moments_from_paths(samples, cfg["x0"], delta)
    except ValueError as exc:
        raise UsageError(str(exc))

    outdir = _outdir(cfg, "moments")
    payload = {
        "command": "moments",
        "ensemble": str(cfg["ensemble"]),
        "x0": cfg["x0"],
        "record": r,
        "time": float(ens.times[r]),
        "delta": delta,
        "drift": pm.drift,
        "drift_se": pm.drift_se,
        "diffusion": pm.diffusion,
        "diffusion_se": pm.diffusion_se,
        "n_samples": pm.n_samples,
    }
    _echo_config(outdir, "moments", cfg)
    _write_summary(outdir / "moments.json", payload,
                   time.perf_counter() - started, cfg["workers"])
    print(f"moments: drift {pm.drift:.4g} +- {pm.drift_se:.2g}, diffusion "
          f"{pm.diffusion:.4g} +- {pm.diffusion_se:.2g}, outputs in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# validate


def _check(name: str, passed: bool, measured, tolerance) -> dict[str, Any]:
    return {"name": name, "passed": bool(passed), "measured": measured,
            "tolerance": tolerance}


def _factorization_check(case: Case, times) -> dict[str, Any]:
    grid = make_uniform_grid(case.x_min, case.x_max, 401)
    worst = 0.0
    for t in times:
        rho = case.rho(grid.nodes, t)
        fg = case.factor_forward(grid.nodes, t) * case.factor_backward(
            grid.nodes, t)
        denom = np.maximum(rho, 1e-300)
        worst = max(worst, float(np.max(np.abs(fg - rho) / denom)))
    return _check("factor_product_matches_density", worst <= 1e-12, worst, 1e-12)


def _drift_identity_error(case: Case, t: float, lo: float, hi: float,
                          n: int) -> float:
    grid = make_uniform_grid(lo, hi, n)
    lg = np.log(case.factor_backward(grid.nodes, t))
    fd = (lg[2:] - lg[:-2]) / grid.h  # equals 2 * centered d/dx
    return float(np.max(np.abs(fd - case.drift(grid.nodes[1:-1], t))))


def _fokker_planck_residual(case: Case, h: float, dt: float,
                            t: float = 0.5, lo: float = -6.0,
                            hi: float = 6.0) -> float:
    n = int(round((hi - lo) / h)) + 1
    # stagger the nodes off x = 0 so b*rho is evaluated away from the node
    grid = make_uniform_grid(lo + 0.5 * h, hi + 0.5 * h, n)
    x = grid.nodes
    rho_m = case.rho(x, t - dt)
    rho_0 = case.rho(x, t)
    rho_p = case.rho(x, t + dt)
    flux = case.drift(x, t) * rho_0
    dt_rho = (rho_p[1:-1] - rho_m[1:-1]) / (2.0 * dt)
    lap = (rho_0[:-2] - 2.0 * rho_0[1:-1] + rho_0[2:]) / (h * h)
    div = (flux[2:] - flux[:-2]) / (2.0 * h)
    resid = float(np.max(np.abs(dt_rho - lap + div)))
    return resid / float(np.max(np.abs(lap)))


def _fokker_planck_check(case: Case) -> dict[str, Any]:
    coarse = _fokker_planck_residual(case, 0.04, 0.02)
    fine = _fokker_planck_residual(case, 0.02, 0.01)
    ratio = coarse / fine
    ok = fine <= 1e-3 and ratio >= 3.0
    return _check("fokker_planck_second_order", ok,
                  {"coarse": coarse, "fine": fine, "ratio": ratio},
                  {"fine": 1e-3, "ratio": 3.0})


def _eigen_residual(grid, psi: np.ndarray, pot_raw: np.ndarray,
                    energy: float) -> float:
    h = grid.h
    lap = (psi[:-2] - 2.0 * psi[1:-1] + psi[2:]) / (h * h)
    r = -lap + (pot_raw[1:-1] - energy) * psi[1:-1]
    w = grid.weights[1:-1]
    return math.sqrt(float(w @ (r * r)) / float(w @ (psi[1:-1] ** 2)))


def _battery_gaussian(case: Case) -> list[dict[str, Any]]:
    checks = [_factorization_check(case, (0.0, 0.25, 0.5, 0.75, 1.0))]
    err = _drift_identity_error(case, 0.5, -6.0, 6.0, 301)
    # ln g is quadratic in x, so the centered difference is exact to rounding
    checks.append(_check("drift_is_twice_log_slope", err <= 1e-9, err, 1e-9))
    checks.append(_fokker_planck_check(case))
    diag = nodal_contradiction_diagnostic(case)
    checks.append(_check(
        "kink_witness_control", not diag.contradictory,
        {"jump_closed": diag.jump_closed, "jump_numeric": diag.jump_numeric},
        "contradictory must be False"))
    return checks


def _battery_harmonic(case: Case) -> list[dict[str, Any]]:
    from .kernels import assemble_kernel_pde

    checks = []
    grid = make_uniform_grid(-8.0, 8.0, 801)
    x = grid.nodes
    tau = 0.5
    spec = case.potential
    kp = assemble_kernel_pde(spec, grid, 0.0, tau, 256)
    kc = kernel_from_function(grid, 0.0, tau, harmonic_kernel)
    inner = np.abs(x) <= 5.0
    box = np.ix_(inner, inner)
    peak = float(kc.entries.max())
    dev = float(np.max(np.abs(kp.entries[box] - kc.entries[box]))) / peak
    checks.append(_check("pde_kernel_matches_closed_form", dev <= 1e-3,
                         dev, 1e-3))

    ck = chapman_kolmogorov_residual(
        kernel_from_function(grid, 0.0, 0.25, harmonic_kernel),
        kernel_from_function(grid, 0.25, 0.5, harmonic_kernel),
        kc, edge_margin=4.0)
    checks.append(_check("closed_kernel_composes", ck <= 1e-5, ck, 1e-5))

    # the density is invariant under the kernel tilted by the stationary
    # factor, p = k g0(x)/g0(y); the raw kernel alone decays every mode
    rho0 = case.rho(x, 0.0)
    g0 = np.sqrt(rho0)
    evolved = g0 * ((grid.weights * g0) @ kp.entries)
    drifted = float(grid.weights @ np.abs(evolved - rho0))
    checks.append(_check("stationary_density_is_preserved", drifted <= 1e-4,
                         drifted, 1e-4))

    pot_raw = x * x
    for nlev in (0, 1):
        psi = np.exp(-0.5 * x * x) * (x if nlev == 1 else 1.0)
        res = _eigen_residual(grid, psi, pot_raw, case.eigenvalue(nlev))
        checks.append(_check(f"eigen_residual_n{nlev}", res <= 1e-3,
                             res, 1e-3))
    return checks


def _battery_stable_node(case: Case) -> list[dict[str, Any]]:
    checks = [_factorization_check(case, (0.0, 0.25, 0.5, 0.75, 1.0))]

    t = 0.7
    grid = make_uniform_grid(0.02, 6.0, 300)
    xp = grid.nodes
    s_pos = 0.5 * np.log(case.factor_backward(xp, t) / case.factor_forward(xp, t))
    s_neg = 0.5 * np.log(case.factor_backward(-xp, t) / case.factor_forward(-xp, t))
    gap = float(np.max(np.abs(s_pos - s_neg + math.pi)))
    checks.append(_check("phase_steps_by_pi_across_node", gap <= 1e-12,
                         gap, 1e-12))
    vel = (s_pos[2:] - s_pos[:-2]) / grid.h  # 2 * centered phase slope
    verr = float(np.max(np.abs(vel - case.velocity(xp[1:-1], t))))
    checks.append(_check("velocity_is_twice_phase_slope", verr <= 1e-9,
                         verr, 1e-9))

    coarse = _drift_identity_error(case, 0.5, 0.5, 6.5, 151)
    fine = _drift_identity_error(case, 0.5, 0.5, 6.5, 301)
    order = math.log2(coarse / fine)
    ok = fine <= 5e-3 and order >= 1.8
    checks.append(_check("drift_is_twice_log_slope_order2", ok,
                         {"coarse": coarse, "fine": fine, "order": order},
                         {"fine": 5e-3, "order": 1.8}))

    checks.append(_fokker_planck_check(case))

    diag = nodal_contradiction_diagnostic(case)
    checks.append(_check(
        "kink_survives_refinement_kernel_smooths", diag.contradictory,
        {"jump_closed": diag.jump_closed, "jump_numeric": diag.jump_numeric,
         "sup_residual": diag.sup_residual},
        "contradictory must be True"))
    return checks


def _battery_centrifugal(case: Case) -> list[dict[str, Any]]:
    checks = []
    grid = make_uniform_grid(0.0, 8.0, 801)
    x = grid.nodes
    mass = float(grid.weights @ case.rho(x, 0.0))
    checks.append(_check("ground_density_has_unit_mass",
                         abs(mass - 1.0) <= 1e-6, mass, 1e-6))

    block = degeneracy_block_check()
    checks.append(_check("ground_eigen_residual",
                         block.eigen_residual <= 1e-3,
                         block.eigen_residual, 1e-3))
    checks.append(_check(
        "barrier_blocks_crossings", block.blocked,
        {"cross": {"mean": block.cross.mean, "se": block.cross.std_error,
                   "excluded": block.cross.n_excluded},
         "same_half": {"mean": block.same_half.mean,
                       "se": block.same_half.std_error},
         "control_cross": {"mean": block.control_cross.mean,
                           "se": block.control_cross.std_error}},
        "cross within 3 se of 0, same half and control positive at 5 se"))

    gamma = 1.0
    alpha = math.sqrt(1.0 + 8.0 * gamma)
    p = 0.5 * (1.0 + alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        pot_raw = x * x + 2.0 * gamma / (x * x)
    psi1 = np.where(x > 0.0, np.abs(x) ** p, 0.0) * np.exp(-0.5 * x * x) \
        * (1.0 + 0.5 * alpha - x * x)
    res1 = _eigen_residual(grid, psi1, pot_raw, 6.0 + alpha)
    checks.append(_check("eigen_residual_n1", res1 <= 2e-3, res1, 2e-3))
    return checks


def _battery_moving_node(case: Case) -> list[dict[str, Any]]:
    rep = moving_node_consistency()
    checks = [
        _check("density_zero_only_at_nodal_event",
               rep.density_at_node == 0.0 and rep.min_density_elsewhere > 0.0,
               {"at_node": rep.density_at_node,
                "min_elsewhere": rep.min_density_elsewhere},
               "0 at the node, positive elsewhere"),
        _check("potential_recovery_order",
               bool(np.all(rep.recovery_orders >= 1.8)),
               {"errors": rep.recovery_errors, "orders": rep.recovery_orders},
               1.8),
        _check("nodal_instant_potential_identity",
               rep.identity_gap <= 1e-12, rep.identity_gap, 1e-12),
        _check("half_spectrum_identity", rep.energy == 2.5 == case.eigenvalue(0),
               rep.energy, "exactly 5/2"),
    ]
    grid = make_uniform_grid(case.x_min, case.x_max, 401)
    m0 = float(np.min(case.rho(grid.nodes, 0.0)))
    mT = float(np.min(case.rho(grid.nodes, case.horizon)))
    checks.append(_check("endpoint_densities_positive",
                         m0 > 0.0 and mT > 0.0,
                         {"t0_min": m0, "t1_min": mT}, "strictly positive"))
    return checks


_BATTERIES = {
    "gaussian": _battery_gaussian,
    "harmonic": _battery_harmonic,
    "stable_node": _battery_stable_node,
    "centrifugal": _battery_centrifugal,
    "moving_node": _battery_moving_node,
}


def cmd_validate(cfg: dict[str, Any]) -> int:
    started = time.perf_counter()
    name = cfg["case"]
    if name not in _BATTERIES:
        raise UsageError(f"unknown case {name!r}, pick one of "
                         f"{', '.join(_CASE_NAMES)}")
    case = all_cases()[name]
    checks = _BATTERIES[name](case)
    all_passed = all(c["passed"] for c in checks)
    payload = {
        "command": "validate",
        "case": name,
        "checks": checks,
        "all_passed": all_passed,
    }
    outdir = _outdir(cfg, f"validate_{name}")
    _echo_config(outdir, "validate", cfg)
    _write_summary(outdir / "report.json", payload,
                   time.perf_counter() - started, cfg["workers"])
    for c in checks:
        print(f"validate[{name}] {c['name']}: "
              f"{'pass' if c['passed'] else 'FAIL'}")
    if not all_passed:
        failing = ", ".join(c["name"] for c in checks if not c["passed"])
        print(f"validate: FAILED ({failing}), report in {outdir}",
              file=sys.stderr)
        return 3
    print(f"validate: all checks passed, report in {outdir}")
    return 0


# ---------------------------------------------------------------------------


_DISPATCH = {
    "solve": cmd_solve,
    "kernel": cmd_kernel,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "moments": cmd_moments,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("pick a subcommand: solve, kernel, simulate, "
                             "validate, moments")
        cfg = _resolve_config(args.command, args)
        return _DISPATCH[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
