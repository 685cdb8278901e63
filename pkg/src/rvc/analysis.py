"""Consumers of solved value fields: membership and volume queries, gain
sweeps, and synthesis of a lights-off time budget with its activation policy.

The budget pipeline: a zero-uncertainty solve gives a surrogate failure level
(its raw values, not the sign, so the second solve keeps a Lipschitz surface
to propagate), a growing-uncertainty solve against that surrogate gives
V_grow, and the per-node budget tau* is the longest dark time V_grow stays
positive, recovered by scanning stored slices with a linear sign crossing.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import EvalStats, Grid, ScalarField, interpolate
from .hamiltonian import ExactTanProportional
from .models import ClosedLoopModel, TanProportional
from .rollout import Trajectory, _in_domain, _pick_adversary, value_gradient
from .solver import ImportedField, SolveConfig, ValueField, query_value, solve


# === membership and volume ==================================================

def brt_membership(vf: ValueField, x, t: float,
                   stats: EvalStats | None = None) -> bool:
    """True when the query sits inside the backward tube (value <= 0)."""
    return query_value(vf, x, t, stats) <= 0.0


def slice_at(vf: ValueField, t: float) -> np.ndarray:
    """Node values at time ``t``, blended between bracketing stored slices."""
    if t < vf.t0 - 1e-9 or t > vf.T + 1e-9:
        raise ValueError(f"time {t} outside stored horizon [{vf.t0}, {vf.T}]")
    t = min(max(t, vf.t0), vf.T)
    asc = vf.times[::-1]
    j = int(np.searchsorted(asc, t, side="left"))
    j = min(max(j, 0), len(asc) - 1)
    k = len(vf.times) - 1 - j
    if vf.times[k] - t <= 1e-12:
        return vf.values[k]
    w = (vf.times[k] - t) / (vf.times[k] - vf.times[k + 1])
    return (1.0 - w) * vf.values[k] + w * vf.values[k + 1]


def safe_volume(vf: ValueField, t: float) -> float:
    """Cell-counting measure of the strictly-positive region at time ``t``.

    Per-node weights are the product of the per-axis quadrature weights, so a
    field that is positive everywhere integrates to the exact domain volume.
    """
    vals = slice_at(vf, t)
    g = vf.grid
    measure = np.ones(())
    for d in range(g.ndim):
        measure = np.multiply.outer(measure, g.axis_weights(d))
    return float(np.sum(measure, where=vals > 0.0))


# === gain sweeps ============================================================

@dataclass(frozen=True)
class SweepResult:
    """Value at the probe state per gain cell.  Failed cells hold NaN and an
    entry in ``failures``; ``argmax`` is the best finite cell or None."""

    a_values: np.ndarray
    b_values: np.ndarray
    values: np.ndarray
    argmax: tuple | None
    failures: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.a_values), len(self.b_values)):
            raise ValueError(f"values shape {v.shape} does not match axes")
        object.__setattr__(self, "values", v)


def _sweep_cell(payload):
    model, failure, cfg, x0 = payload
    try:
        vf = solve(model, failure, cfg)
        return float(query_value(vf, x0, cfg.t0)), None
    except Exception as exc:
        return float("nan"), f"{type(exc).__name__}: {exc}"


def sweep_hyperparameters(model: ClosedLoopModel, a_values, b_values,
                          failure, cfg: SolveConfig, x0,
                          workers: int = 1) -> SweepResult:
    """Solve once per (a, b) gain cell and record the value at ``x0``.

    ``cfg`` is a template; its ``hamiltonian`` is replaced per cell with the
    tangent-law arm for that cell's gains.  A failing cell (bad gains, solve
    blowup) becomes a NaN sentinel and the sweep carries on.  Cells are
    independent, so ``workers > 1`` fans them out across processes; results
    are ordered, making the output identical either way.
    """
    a_values = np.atleast_1d(np.asarray(a_values, dtype=np.float64))
    b_values = np.atleast_1d(np.asarray(b_values, dtype=np.float64))
    values = np.full((len(a_values), len(b_values)), np.nan)
    failures = []
    cells, payloads = [], []
    for i, a in enumerate(a_values):
        for j, b in enumerate(b_values):
            try:
                ctrl = TanProportional(a=float(a), b=float(b))
                m = ClosedLoopModel(dynamics=model.dynamics, controller=ctrl,
                                    error=model.error)
                c = dataclasses.replace(
                    cfg, hamiltonian=ExactTanProportional(model=m))
            except Exception as exc:
                failures.append((i, j, f"{type(exc).__name__}: {exc}"))
                continue
            cells.append((i, j))
            payloads.append((m, failure, c, x0))

    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_cell, payloads))
    else:
        outcomes = [_sweep_cell(p) for p in payloads]
    for (i, j), (val, err) in zip(cells, outcomes):
        values[i, j] = val
        if err is not None:
            failures.append((i, j, err))

    argmax = None
    if np.any(np.isfinite(values)):
        argmax = tuple(int(k) for k in
                       np.unravel_index(np.nanargmax(values), values.shape))
    return SweepResult(a_values=a_values, b_values=b_values, values=values,
                       argmax=argmax, failures=tuple(sorted(failures)))


def write_sweep_csv(result: SweepResult, path_or_file) -> None:
    if not hasattr(path_or_file, "write"):
        with open(path_or_file, "w", newline="") as f:
            write_sweep_csv(result, f)
        return
    f = path_or_file
    f.write("a,b,value\n")
    for i, a in enumerate(result.a_values):
        for j, b in enumerate(result.b_values):
            f.write(f"{float(a)!r},{float(b)!r},{float(result.values[i, j])!r}\n")


# === dark-time budget =======================================================

@dataclass(frozen=True)
class DarkBudgetField:
    """Per-node longest safe lights-off duration (seconds)."""

    grid: Grid
    tau_star: np.ndarray

    def __post_init__(self):
        tau = np.ascontiguousarray(self.tau_star, dtype=np.float64)
        if tau.shape != tuple(self.grid.shape):
            raise ValueError(f"tau shape {tau.shape} != grid shape {self.grid.shape}")
        if np.any(tau < 0) or not np.all(np.isfinite(tau)):
            raise ValueError("budget entries must be finite and >= 0")
        object.__setattr__(self, "tau_star", tau)

    def as_field(self) -> ScalarField:
        return ScalarField(grid=self.grid, values=self.tau_star)

    def at(self, x, stats: EvalStats | None = None) -> float:
        return interpolate(self.as_field(), x, stats)


def synthesize_dark_budget(model: ClosedLoopModel, zero_unc_vf: ValueField,
                           cfg: SolveConfig) -> DarkBudgetField:
    """Budget from a second solve against the zero-uncertainty surrogate.

    tau*(x) is the largest dark time the growing-uncertainty value stays
    positive, linearly interpolated between stored slices, zero wherever the
    surrogate is already non-positive.  Resolution in time is one save
    stride of the ``cfg`` solve.
    """
    if model.error.is_static:
        raise ValueError("budget synthesis needs a growing error bound")
    if not cfg.grid.compatible(zero_unc_vf.grid):
        raise ValueError("budget grid differs from the zero-uncertainty grid")
    surrogate = zero_unc_vf.final()
    grow = solve(model, ImportedField(
        field=ScalarField(grid=cfg.grid, values=surrogate)), cfg)

    taus = grow.T - grow.times  # ascending dark durations, taus[0] == 0
    vals = grow.values          # vals[k] = V_grow(., T - taus[k])
    n_t = len(taus)
    pos = vals > 0.0
    count = pos.sum(axis=0)  # slices stay ordered, so positives are a prefix
    tau_star = np.zeros(tuple(cfg.grid.shape))
    full = count == n_t
    tau_star[full] = taus[-1]
    cross = (count > 0) & ~full
    if np.any(cross):
        k = count[cross] - 1
        flat = vals.reshape(n_t, -1)
        cols = np.flatnonzero(cross.ravel())
        a = flat[k, cols]
        b = flat[k + 1, cols]
        frac = a / (a - b)
        tau_star[cross] = taus[k] + (taus[k + 1] - taus[k]) * frac
    return DarkBudgetField(grid=cfg.grid, tau_star=tau_star)


def light_policy_step(budget: DarkBudgetField, x, elapsed_dark: float,
                      margin: float, stats: EvalStats | None = None) -> bool:
    """True when the lights must turn on: the dark time spent plus the safety
    margin has used up the local budget.  The caller resets its dark clock on
    activation.  ``margin`` should cover at least one integration step."""
    if elapsed_dark < 0 or margin < 0:
        raise ValueError("elapsed dark time and margin must be >= 0")
    return bool(elapsed_dark + margin >= budget.at(x, stats))


def policy_rollout(model: ClosedLoopModel, budget: DarkBudgetField,
                   guide: ValueField, failure, x0, horizon: float, dt: float,
                   margin: float, stats: EvalStats | None = None) -> Trajectory:
    """Forward simulation under the activation policy and a worst-case
    adversary steered by the zero-uncertainty guide field.

    The dark clock runs forward from zero and resets instantly on activation;
    the step's error box is the bound at the clock's current reading, so a
    lights-on step perceives exactly.
    """
    if stats is None:
        stats = EvalStats()
    if dt <= 0 or horizon < 0:
        raise ValueError(f"need dt > 0 and horizon >= 0, got {dt}, {horizon}")
    g = guide.grid
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (g.ndim,):
        raise ValueError(f"start state shape {x.shape}, expected ({g.ndim},)")
    if not _in_domain(g, x):
        raise ValueError(f"start state {x} outside the grid")
    n_steps = 0 if horizon == 0 else int(np.ceil(horizon / dt - 1e-9))
    dt_eff = 0.0 if n_steps == 0 else horizon / n_steps
    t_guide = guide.t0

    states = [x.copy()]
    l_vals = [float(failure.l_point(x))]
    perceived, controls, errors, dists, lights = [], [], [], [], []
    elapsed = 0.0
    truncated = False
    for _ in range(n_steps):
        on = light_policy_step(budget, x, elapsed, margin, stats)
        if on:
            elapsed = 0.0
        grad = value_gradient(guide, x, t_guide, stats)
        e, d, u, f = _pick_adversary(model, x, grad, elapsed, stats)
        xn = x + dt_eff * f
        if not _in_domain(g, xn):
            truncated = True
            stats.truncated_rollouts += 1
            break
        perceived.append(x + e)
        controls.append(u)
        errors.append(e)
        dists.append(d)
        lights.append(on)
        x = xn
        states.append(x.copy())
        l_vals.append(float(failure.l_point(x)))
        elapsed += dt_eff

    kept = len(states) - 1
    box = model.dynamics.disturbance_box
    d_arr = None
    if box is not None:
        d_arr = np.array(dists, dtype=np.float64).reshape(
            kept, len(np.atleast_1d(box[0])))
    return Trajectory(
        times=dt_eff * np.arange(kept + 1),
        states=np.array(states),
        perceived=np.array(perceived).reshape(kept, g.ndim),
        controls=np.array(controls).reshape(kept, model.dynamics.control_dim),
        errors=np.array(errors).reshape(kept, g.ndim),
        l_values=np.array(l_vals),
        truncated=truncated,
        disturbances=d_arr,
        lights=np.array(lights, dtype=bool),
    )
