"""Command-line front end: assemble a scenario, run one stage, write a run
directory.

Scenarios come from a shipped preset (``--preset`` plus its knobs) or from a
config file (``--config``, YAML); flags override config keys.  Every run
writes its outputs and a ``manifest.json`` into the run directory; the
manifest echoes the scenario, lists each output with a sha256 and byte size,
and records wall time and evaluation warnings.  Binary and CSV outputs are
deterministic for a fixed configuration and seed; timing lives only in the
manifest.

Exit codes: 0 done, 1 a requested safety assertion failed (``--assert-safe``),
2 the configuration was rejected.

Config schema (all sections required unless noted; paths are relative to the
config file)::

    grid:    {lo: [..], hi: [..], shape: [..], periodic: [..]}
    model:
      dynamics:   {name: dubins3d, v: 5.0}
      controller: {kind: tan_proportional, a: -0.013, b: -0.44}
                  # or {kind: tabulated, path: table.rvct}
                  # or {kind: mlp, path: weights.bin}
      error:      {mode: static, bound: [..]}
                  # or {mode: linear_growth, rates: [..]}
    failure: {kind: slab, dim: 0, magnitude: 10.0}
             # or {kind: discs, centers: [[x, y], ..], radii: [..]}
             # or {kind: field, path: level.rvcf}
    solve:   {horizon: 5.0, t0: 0.0, cfl: 0.5, save_stride: null,
              max_store_mb: 256.0, dark_time_samples: 51}   # horizon required
    hamiltonian: {arm: tan | enumeration | interval, bounds: bounds.rvcb}
                 # optional; default arm follows the controller kind
    start:   [0.0, 100.0, 0.0]   # optional; defaults to the grid midpoint
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np
import yaml

from .analysis import (
    DarkBudgetField,
    policy_rollout,
    slice_at,
    sweep_hyperparameters,
    synthesize_dark_budget,
    write_sweep_csv,
)
from .bounds import build_bounds_field, read_bounds, write_bounds
from .grid import (
    FIELD_MAGIC,
    EvalStats,
    Grid,
    ScalarField,
    export_slice_csv,
    read_field,
    write_field,
)
from .models import ClosedLoopModel, ErrorBound, Mlp, Tabulated, TanProportional, build_model
from .presets import CaseStudy, rover, taxiing
from .rollout import (
    monte_carlo_min_l,
    nominal_rollout,
    worst_case_rollout,
    write_trajectory_csv,
)
from .solver import (
    VALUE_MAGIC,
    CircularObstacles,
    ImportedField,
    SlabKeepout,
    SolveConfig,
    query_value,
    read_value_field,
    solve,
    write_value_field,
)
from .hamiltonian import ExactEnumerated, ExactTanProportional, IntervalBounded


# === scenario assembly ======================================================

def _parse_floats(text: str) -> np.ndarray:
    try:
        return np.array([float(p) for p in text.split(",")])
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}")


def _parse_range(text: str) -> np.ndarray:
    """'lo:hi:n' inclusive, or a comma list, or a single number."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range must be lo:hi:n, got {text!r}")
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        if n < 1:
            raise ValueError(f"range needs n >= 1, got {text!r}")
        return np.linspace(lo, hi, n)
    return _parse_floats(text)


def _section(data: dict, key: str, known: tuple) -> dict:
    sec = data.get(key)
    if not isinstance(sec, dict):
        raise ValueError(f"config section {key!r} must be a mapping")
    extra = set(sec) - set(known)
    if extra:
        raise ValueError(f"unknown keys in {key!r}: {sorted(extra)}")
    return dict(sec)


def _grid_from_cfg(sec: dict) -> Grid:
    try:
        return Grid(lo=sec["lo"], hi=sec["hi"], shape=sec["shape"],
                    periodic=sec.get("periodic", [False] * len(sec["lo"])))
    except KeyError as e:
        raise ValueError(f"grid section missing key {e.args[0]!r}")


def _failure_from_cfg(sec: dict, base: str):
    kind = sec.pop("kind", None)
    if kind == "slab":
        return SlabKeepout(dim=int(sec.pop("dim")),
                           magnitude=float(sec.pop("magnitude")))
    if kind == "discs":
        return CircularObstacles(centers=sec.pop("centers"),
                                 radii=sec.pop("radii"))
    if kind == "field":
        return ImportedField(field=read_field(os.path.join(base, sec.pop("path"))))
    raise ValueError(f"unknown failure kind {kind!r}")


def _default_arm(model: ClosedLoopModel, grid: Grid, horizon: float,
                 samples: int):
    ctrl = model.controller
    if isinstance(ctrl, TanProportional):
        return ExactTanProportional(model=model)
    if isinstance(ctrl, Tabulated):
        return ExactEnumerated(model=model)
    tp = None if model.error.is_static else np.linspace(0.0, horizon, samples)
    return IntervalBounded(dynamics=model.dynamics,
                           bounds=build_bounds_field(model, grid, tprimes=tp))


def _ham_from_cfg(sec: dict | None, model: ClosedLoopModel, grid: Grid,
                  horizon: float, samples: int, base: str):
    if sec is None:
        return _default_arm(model, grid, horizon, samples)
    sec = dict(sec)
    arm = sec.pop("arm", None)
    path = sec.pop("bounds", None)
    if sec:
        raise ValueError(f"unknown keys in 'hamiltonian': {sorted(sec)}")
    if arm == "tan":
        if not isinstance(model.controller, TanProportional):
            raise ValueError("the tan arm needs a tan_proportional controller")
        return ExactTanProportional(model=model)
    if arm == "enumeration":
        if not isinstance(model.controller, Tabulated):
            raise ValueError("the enumeration arm needs a tabulated controller")
        return ExactEnumerated(model=model)
    if arm == "interval":
        if path is not None:
            return IntervalBounded(dynamics=model.dynamics,
                                   bounds=read_bounds(os.path.join(base, path)))
        return _default_arm(
            model, grid, horizon, samples) if isinstance(model.controller, Mlp) \
            else IntervalBounded(
                dynamics=model.dynamics,
                bounds=build_bounds_field(
                    model, grid,
                    tprimes=None if model.error.is_static
                    else np.linspace(0.0, horizon, samples)))
    raise ValueError(f"unknown hamiltonian arm {arm!r}")


_CONFIG_SECTIONS = ("grid", "model", "failure", "solve", "hamiltonian", "start")


def _case_from_config(path: str) -> CaseStudy:
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    extra = set(data) - set(_CONFIG_SECTIONS)
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    for key in ("grid", "model", "failure", "solve"):
        if key not in data:
            raise ValueError(f"config missing section {key!r}")
    base = os.path.dirname(os.path.abspath(path))
    grid = _grid_from_cfg(_section(data, "grid", ("lo", "hi", "shape", "periodic")))
    model = build_model(data["model"], base_dir=base)
    if model.dynamics.state_dim != grid.ndim:
        raise ValueError(f"model state dim {model.dynamics.state_dim} != "
                         f"grid dim {grid.ndim}")
    failure = _failure_from_cfg(
        _section(data, "failure", ("kind", "dim", "magnitude", "centers",
                                   "radii", "path")), base)
    sv = _section(data, "solve", ("horizon", "t0", "cfl", "save_stride",
                                  "max_store_mb", "dark_time_samples"))
    if "horizon" not in sv:
        raise ValueError("solve section needs 'horizon'")
    horizon = float(sv["horizon"])
    t0 = float(sv.get("t0", 0.0))
    samples = int(sv.get("dark_time_samples", 51))
    ham = _ham_from_cfg(data.get("hamiltonian"), model, grid,
                        horizon - t0, samples, base)
    cfg = SolveConfig(
        grid=grid, hamiltonian=ham, t0=t0, T=horizon,
        cfl=float(sv.get("cfl", 0.5)),
        save_stride=(None if sv.get("save_stride") is None
                     else int(sv["save_stride"])),
        max_store_mb=float(sv.get("max_store_mb", 256.0)),
        dark_time_samples=samples)
    start = np.asarray(data.get("start", 0.5 * (grid.lo + grid.hi)),
                       dtype=np.float64)
    name = os.path.splitext(os.path.basename(path))[0]
    return CaseStudy(name=name, model=model, failure=failure, config=cfg,
                     start=start)


def _scenario(args) -> CaseStudy:
    if getattr(args, "preset", None):
        if args.config:
            raise ValueError("give either --preset or --config, not both")
        if args.preset == "taxiing":
            case = taxiing(rung=args.rung, full=args.full)
        else:
            case = rover(controller=args.controller,
                         lights_on=args.lights_on, full=args.full)
    elif getattr(args, "config", None):
        case = _case_from_config(args.config)
    else:
        raise ValueError("need --preset or --config")
    cfg = case.config
    replace = {}
    if getattr(args, "save_stride", None) is not None:
        replace["save_stride"] = args.save_stride
    if getattr(args, "horizon", None) is not None:
        replace["T"] = args.horizon
    if getattr(args, "t0", None) is not None:
        replace["t0"] = args.t0
    if replace:
        cfg = dataclasses.replace(cfg, **replace)
    start = case.start
    if getattr(args, "state", None):
        start = _parse_floats(args.state)
    if replace or start is not case.start:
        case = dataclasses.replace(case, config=cfg, start=start)
    return case


# === run directory and manifest =============================================

def _run_dir(args, command: str) -> str:
    out = args.out or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    return out


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stat_warnings(stats: EvalStats) -> list:
    w = []
    if stats.clamped_queries:
        w.append(f"{stats.clamped_queries} interpolation queries clamped to the grid")
    if stats.tan_clamps:
        w.append(f"{stats.tan_clamps} tan arguments saturated")
    if stats.truncated_rollouts:
        w.append(f"{stats.truncated_rollouts} rollouts left the grid early")
    return w


def _write_manifest(run_dir: str, command: str, scenario: str, echo: dict,
                    outputs: list, wall: float,
                    stats: EvalStats | None = None, extra: dict | None = None):
    manifest = {
        "command": command,
        "scenario": scenario,
        "config": echo,
        "outputs": {os.path.basename(p): {"sha256": _sha256(p),
                                          "bytes": os.path.getsize(p)}
                    for p in outputs},
        "warnings": _stat_warnings(stats) if stats else [],
        "stats": stats.as_dict() if stats else {},
        "wall_seconds": round(wall, 3),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _echo(args, keys: tuple) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _artifact(path: str, default_name: str) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, default_name)
    if not os.path.isfile(path):
        raise ValueError(f"no such file: {path}")
    return path


# === subcommands ============================================================

_SCENARIO_KEYS = ("preset", "rung", "controller", "lights_on", "full",
                  "config", "state", "save_stride", "horizon", "t0")


def _cmd_solve(args) -> int:
    case = _scenario(args)
    run_dir = _run_dir(args, "solve")
    t_start = time.perf_counter()
    vf = solve(case.model, case.failure, case.config)
    v0 = query_value(vf, case.start, case.config.t0)
    out = os.path.join(run_dir, "value.rvvf")
    write_value_field(vf, out)
    wall = time.perf_counter() - t_start
    _write_manifest(run_dir, "solve", case.name, _echo(args, _SCENARIO_KEYS),
                    [out], wall, stats=vf.stats,
                    extra={"value_at_start": v0, "start": list(map(float, case.start)),
                           "march_dt": vf.dt, "stored_slices": len(vf.times)})
    print(f"{case.name}: V(start, t0) = {v0:.6g}; "
          f"{len(vf.times)} slices -> {out}")
    if args.assert_safe and v0 <= 0.0:
        print("assert-safe: start state is NOT verified safe")
        return 1
    return 0


def _cmd_bounds(args) -> int:
    case = _scenario(args)
    run_dir = _run_dir(args, "bounds")
    t_start = time.perf_counter()
    cfg = case.config
    tp = None if case.model.error.is_static else np.linspace(
        0.0, cfg.T - cfg.t0, cfg.dark_time_samples)
    fld = build_bounds_field(case.model, case.grid, tprimes=tp)
    out = os.path.join(run_dir, "bounds.rvcb")
    write_bounds(fld, out)
    wall = time.perf_counter() - t_start
    lo, hi = fld.global_extremes()
    _write_manifest(run_dir, "bounds", case.name, _echo(args, _SCENARIO_KEYS),
                    [out], wall,
                    extra={"control_low": list(map(float, lo)),
                           "control_high": list(map(float, hi)),
                           "dark_time_slices": 1 if fld.tprimes is None
                           else len(fld.tprimes)})
    print(f"{case.name}: control bounds in [{lo}, {hi}] -> {out}")
    return 0


def _cmd_sweep(args) -> int:
    case = _scenario(args)
    a_values = _parse_range(args.a_gains)
    b_values = _parse_range(args.b_gains)
    run_dir = _run_dir(args, "sweep")
    t_start = time.perf_counter()
    res = sweep_hyperparameters(case.model, a_values, b_values, case.failure,
                                case.config, case.start, workers=args.workers)
    out = os.path.join(run_dir, "sweep.csv")
    write_sweep_csv(res, out)
    wall = time.perf_counter() - t_start
    extra = {"cells": int(res.values.size),
             "failed_cells": [[int(i), int(j), msg] for i, j, msg in res.failures]}
    if res.argmax is not None:
        i, j = res.argmax
        extra["best"] = {"a": float(a_values[i]), "b": float(b_values[j]),
                         "value": float(res.values[i, j])}
    _write_manifest(run_dir, "sweep", case.name,
                    _echo(args, _SCENARIO_KEYS + ("a_gains", "b_gains", "workers")),
                    [out], wall, extra=extra)
    if res.argmax is None:
        print(f"{case.name}: every sweep cell failed -> {out}")
        return 0
    i, j = res.argmax
    print(f"{case.name}: best gains a={a_values[i]:.6g} b={b_values[j]:.6g} "
          f"(V={res.values[i, j]:.6g}, {len(res.failures)} failed cells) -> {out}")
    return 0


def _zero_uncertainty(case: CaseStudy) -> CaseStudy:
    """The same scenario with the error box pinned at zero."""
    model = case.model
    model0 = dataclasses.replace(
        model, error=ErrorBound.static(np.zeros(model.dynamics.state_dim)))
    ham = case.config.hamiltonian
    if isinstance(ham, ExactTanProportional):
        ham0 = ExactTanProportional(model=model0)
    elif isinstance(ham, ExactEnumerated):
        ham0 = ExactEnumerated(model=model0)
    else:
        ham0 = IntervalBounded(dynamics=model0.dynamics,
                               bounds=build_bounds_field(model0, case.grid))
    cfg0 = dataclasses.replace(case.config, hamiltonian=ham0)
    return dataclasses.replace(case, name=case.name + "-lights-on",
                               model=model0, config=cfg0)


def _cmd_budget(args) -> int:
    case = _scenario(args)
    if case.model.error.is_static:
        raise ValueError("budget synthesis needs a growing error bound "
                         "(drop --lights-on)")
    run_dir = _run_dir(args, "budget")
    t_start = time.perf_counter()
    zero = _zero_uncertainty(case)
    guide = solve(zero.model, zero.failure, zero.config)
    budget = synthesize_dark_budget(case.model, guide, case.config)
    out_budget = os.path.join(run_dir, "budget.rvcf")
    out_guide = os.path.join(run_dir, "guide.rvvf")
    write_field(budget.as_field(), out_budget)
    write_value_field(guide, out_guide)
    wall = time.perf_counter() - t_start
    tau = budget.tau_star
    _write_manifest(run_dir, "budget", case.name, _echo(args, _SCENARIO_KEYS),
                    [out_budget, out_guide], wall, stats=guide.stats,
                    extra={"tau_max": float(tau.max()),
                           "zero_budget_fraction": float((tau == 0.0).mean())})
    print(f"{case.name}: dark budget up to {tau.max():.3g}s, "
          f"{(tau == 0.0).mean():.1%} of states start spent -> {out_budget}")
    return 0


def _cmd_rollout(args) -> int:
    case = _scenario(args)
    vf = read_value_field(_artifact(args.field, "value.rvvf"))
    run_dir = _run_dir(args, "rollout")
    stats = EvalStats()
    t_start = time.perf_counter()
    t0 = args.t0 if args.t0 is not None else vf.t0
    if args.nominal:
        traj = nominal_rollout(vf, case.model, case.start, t0=t0, stats=stats,
                               substeps=args.substeps)
    else:
        traj = worst_case_rollout(vf, case.model, case.start, t0=t0, stats=stats,
                                  substeps=args.substeps)
    out = os.path.join(run_dir, "trajectory.csv")
    write_trajectory_csv(traj, out)
    wall = time.perf_counter() - t_start
    kind = "nominal" if args.nominal else "worst-case"
    _write_manifest(run_dir, "rollout", case.name,
                    _echo(args, _SCENARIO_KEYS + ("field", "nominal", "substeps")),
                    [out], wall, stats=stats,
                    extra={"min_l": traj.min_l, "steps": traj.n_steps,
                           "truncated": traj.truncated})
    print(f"{case.name}: {kind} rollout min_l = {traj.min_l:.6g} "
          f"over {traj.n_steps} steps -> {out}")
    if args.assert_safe and traj.min_l <= 0.0:
        print("assert-safe: rollout reaches the failure set")
        return 1
    return 0


def _cmd_mc(args) -> int:
    case = _scenario(args)
    run_dir = _run_dir(args, "mc")
    cfg = case.config
    t0 = args.t0 if args.t0 is not None else cfg.t0
    t_start = time.perf_counter()
    mins = monte_carlo_min_l(case.model, case.failure, case.start, t0, cfg.T,
                             samples=args.samples, seed=args.seed, dt=args.dt,
                             domain=case.grid)
    running = np.minimum.accumulate(mins)
    out = os.path.join(run_dir, "mc.csv")
    with open(out, "w") as f:
        f.write("sample,min_l,running_min\n")
        for k in range(len(mins)):
            f.write(f"{k},{float(mins[k])!r},{float(running[k])!r}\n")
    wall = time.perf_counter() - t_start
    _write_manifest(run_dir, "mc", case.name,
                    _echo(args, _SCENARIO_KEYS + ("samples", "seed", "dt")),
                    [out], wall,
                    extra={"estimate": float(running[-1])})
    print(f"{case.name}: MC({args.samples}) min_l estimate = "
          f"{running[-1]:.6g} -> {out}")
    if args.assert_safe and running[-1] <= 0.0:
        print("assert-safe: sampling found an unsafe trajectory")
        return 1
    return 0


def _cmd_policy_check(args) -> int:
    case = _scenario(args)
    budget_path = _artifact(args.budget, "budget.rvcf")
    guide_path = _artifact(args.guide or args.budget, "guide.rvvf")
    fld = read_field(budget_path)
    budget = DarkBudgetField(grid=fld.grid, tau_star=fld.values)
    guide = read_value_field(guide_path)
    run_dir = _run_dir(args, "policy-check")
    stats = EvalStats()
    horizon = args.horizon if args.horizon is not None else case.config.T
    margin = args.margin if args.margin is not None else 2.0 * args.dt
    t_start = time.perf_counter()
    traj = policy_rollout(case.model, budget, guide, case.failure, case.start,
                          horizon=horizon, dt=args.dt, margin=margin,
                          stats=stats)
    out = os.path.join(run_dir, "trajectory.csv")
    write_trajectory_csv(traj, out)
    wall = time.perf_counter() - t_start
    fires = int(traj.lights.sum())
    _write_manifest(run_dir, "policy-check", case.name,
                    _echo(args, _SCENARIO_KEYS + ("budget", "guide", "dt", "margin")),
                    [out], wall, stats=stats,
                    extra={"min_l": traj.min_l, "light_activations": fires,
                           "truncated": traj.truncated})
    print(f"{case.name}: policy rollout min_l = {traj.min_l:.6g}, "
          f"lights fired {fires}x -> {out}")
    if args.assert_safe and traj.min_l <= 0.0:
        print("assert-safe: policy failed to keep the rollout safe")
        return 1
    return 0


def _cmd_export_slice(args) -> int:
    path = _artifact(args.field, "value.rvvf")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == VALUE_MAGIC:
        vf = read_value_field(path)
        t = args.time if args.time is not None else vf.t0
        fld = ScalarField(grid=vf.grid, values=slice_at(vf, t))
    elif magic == FIELD_MAGIC:
        if args.time is not None:
            raise ValueError("--time only applies to value-field files")
        fld = read_field(path)
    else:
        raise ValueError(f"{path} is not a field or value-field file")
    fixed = {}
    for part in (args.fix.split(",") if args.fix else []):
        if "=" not in part:
            raise ValueError(f"--fix wants axis=value pairs, got {part!r}")
        d, v = part.split("=", 1)
        fixed[int(d)] = float(v)
    run_dir = _run_dir(args, "export-slice")
    out = os.path.join(run_dir, args.name)
    t_start = time.perf_counter()
    meta = export_slice_csv(fld, fixed, out)
    wall = time.perf_counter() - t_start
    _write_manifest(run_dir, "export-slice", os.path.basename(path),
                    _echo(args, ("field", "time", "fix", "name")),
                    [out], wall, extra={"slice": meta})
    print(f"slice over axes {meta['free_axes']} (fixed {meta['fixed']}) -> {out}")
    return 0


# === parser =================================================================

def _add_scenario_flags(sp, state_help="override the start state"):
    sp.add_argument("--preset", choices=["taxiing", "rover"],
                    help="use a shipped case study")
    sp.add_argument("--rung", type=int, default=0,
                    help="taxiing error-ladder rung (0 = no error)")
    sp.add_argument("--controller", choices=["table", "mlp"], default="table",
                    help="rover controller arm")
    sp.add_argument("--lights-on", action="store_true",
                    help="rover: pin the error box at zero")
    sp.add_argument("--full", action="store_true",
                    help="use the fine grid instead of the desk-scale one")
    sp.add_argument("--config", help="YAML scenario (see module docs)")
    sp.add_argument("--state", help=state_help + " (comma-separated)")
    sp.add_argument("--save-stride", type=int, help="store every k-th slice")
    sp.add_argument("--horizon", type=float, help="override the solve horizon")
    sp.add_argument("--t0", type=float, help="override the initial time")
    sp.add_argument("--out", help="run directory (default runs/<command>)")
    sp.add_argument("--assert-safe", action="store_true",
                    help="exit 1 unless the result is verified safe")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rvc",
        description="Safety tubes for perception-driven closed loops: solve, "
                    "bound, sweep, budget, and falsify on a grid.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="solve the safety value field")
    _add_scenario_flags(sp)

    sp = sub.add_parser("bounds", help="precompute control-output bounds")
    _add_scenario_flags(sp)

    sp = sub.add_parser("sweep", help="grid-search controller gains")
    _add_scenario_flags(sp)
    sp.add_argument("--a-gains", required=True,
                    help="crosstrack gains, lo:hi:n or comma list")
    sp.add_argument("--b-gains", required=True,
                    help="heading gains, lo:hi:n or comma list")
    sp.add_argument("--workers", type=int,
                    default=int(os.environ.get("RVC_WORKERS", "1")),
                    help="parallel solve processes (env RVC_WORKERS)")

    sp = sub.add_parser("budget", help="synthesize the dark-time budget")
    _add_scenario_flags(sp)

    sp = sub.add_parser("rollout", help="drive a state with the stored field")
    _add_scenario_flags(sp, state_help="start state")
    sp.add_argument("--field", required=True,
                    help="value-field file or a solve run directory")
    sp.add_argument("--nominal", action="store_true",
                    help="zero error and centered disturbance instead of "
                         "the worst case")
    sp.add_argument("--substeps", type=int, default=4,
                    help="integration substeps per solver step; >1 keeps a "
                         "fast-switching controller from cutting corners the "
                         "zero-order hold invents")

    sp = sub.add_parser("mc", help="sampled lower envelope of the safety level")
    _add_scenario_flags(sp, state_help="start state")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dt", type=float, default=0.05)

    sp = sub.add_parser("policy-check",
                        help="roll out the light-activation policy")
    _add_scenario_flags(sp, state_help="start state")
    sp.add_argument("--budget", required=True,
                    help="budget field file or a budget run directory")
    sp.add_argument("--guide", help="zero-uncertainty value field "
                                    "(default: alongside the budget)")
    sp.add_argument("--dt", type=float, default=0.05)
    sp.add_argument("--margin", type=float,
                    help="activation margin in seconds (default 2*dt)")

    sp = sub.add_parser("export-slice", help="write a 2-d CSV slice of a field")
    sp.add_argument("--field", required=True,
                    help=".rvcf/.rvvf file or a run directory")
    sp.add_argument("--time", type=float,
                    help="slice time for value fields (default t0)")
    sp.add_argument("--fix", help="axis=value pairs, comma-separated")
    sp.add_argument("--name", default="slice.csv", help="output CSV name")
    sp.add_argument("--out", help="run directory (default runs/export-slice)")

    return p


_HANDLERS = {
    "solve": _cmd_solve,
    "bounds": _cmd_bounds,
    "sweep": _cmd_sweep,
    "budget": _cmd_budget,
    "rollout": _cmd_rollout,
    "mc": _cmd_mc,
    "policy-check": _cmd_policy_check,
    "export-slice": _cmd_export_slice,
}


def run(argv) -> int:
    """Parse and execute one command; returns the process exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
