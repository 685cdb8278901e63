"""Trajectory checks against a solved value field.

Two ways to stress the verdict: ``worst_case_rollout`` replans the adversary
every step from the gradient of the stored value (the discrete analogue of the
Hamiltonian's pointwise minimization), and ``monte_carlo_value`` rolls out
uniformly sampled error signals, which is the baseline the verified bound is
compared against.

Both integrate the closed loop with explicit Euler, by default at the solver's
own step (``substeps`` refines the march when the controller switches faster
than that), and both measure elapsed dark time from the horizon end
(t' = T - s), the same
anchoring the solve used; a growing error box therefore shrinks as a
trajectory approaches T.  States are stored as integrated, without wrapping
periodic coordinates; every consumer (interpolation, table lookup) wraps
internally.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bounds import enumeration_candidates
from .grid import EvalStats, Grid, ScalarField, interpolate
from .hamiltonian import ham_exact_tan
from .models import (
    ClosedLoopModel,
    Mlp,
    Tabulated,
    TanProportional,
    _disturbance_corners,
    eval_controller,
    eval_controller_batch,
)
from .solver import CircularObstacles, SlabKeepout, ValueField, query_value


@dataclass(frozen=True)
class Trajectory:
    """One closed-loop path.  ``states`` has one more row than the per-step
    arrays; ``perceived[k] = states[k] + errors[k]`` is what the controller
    saw.  ``truncated`` marks a path that left the grid before the horizon
    (stored rows all lie inside)."""

    times: np.ndarray
    states: np.ndarray
    perceived: np.ndarray
    controls: np.ndarray
    errors: np.ndarray
    l_values: np.ndarray
    truncated: bool = False
    disturbances: np.ndarray | None = None
    lights: np.ndarray | None = None

    @property
    def min_l(self) -> float:
        """Worst failure level seen along the path."""
        return float(self.l_values.min())

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def _in_domain(grid: Grid, x: np.ndarray) -> bool:
    for d in range(grid.ndim):
        if grid.periodic[d]:
            continue
        snap = 1e-9 * grid.spacing[d]
        if x[d] < grid.lo[d] - snap or x[d] > grid.hi[d] + snap:
            return False
    return True


def _in_domain_batch(grid: Grid, X: np.ndarray) -> np.ndarray:
    ok = np.ones(X.shape[0], dtype=bool)
    for d in range(grid.ndim):
        if grid.periodic[d]:
            continue
        snap = 1e-9 * grid.spacing[d]
        ok &= (X[:, d] >= grid.lo[d] - snap) & (X[:, d] <= grid.hi[d] + snap)
    return ok


def value_gradient(vf: ValueField, x, t: float,
                   stats: EvalStats | None = None) -> np.ndarray:
    """Central difference of the interpolated value, one spacing per side.

    Non-periodic probes clamp to the domain edge and divide by the actual
    separation, degrading to a one-sided quotient at the boundary.
    """
    g = vf.grid
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(g.ndim)
    for d in range(g.ndim):
        xp, xm = x.copy(), x.copy()
        xp[d] += g.spacing[d]
        xm[d] -= g.spacing[d]
        if not g.periodic[d]:
            xp[d] = min(xp[d], g.hi[d])
            xm[d] = max(xm[d], g.lo[d])
        span = xp[d] - xm[d]
        out[d] = (query_value(vf, xp, t, stats)
                  - query_value(vf, xm, t, stats)) / span
    return out


# === adversary moves ========================================================

def _error_moves(model: ClosedLoopModel, x, grad, t_dark: float,
                 stats: EvalStats | None) -> list:
    """Candidate estimate errors for one step, matching the Hamiltonian arm
    the controller type selects: closed-form corner for the tangent law,
    lookup-cell enumeration for tables, error-box corners for nets."""
    ctrl = model.controller
    if isinstance(ctrl, TanProportional):
        _, e_star = ham_exact_tan(model, x, grad, t_dark, stats)
        return [e_star]
    ebox = model.error.at(t_dark)
    if isinstance(ctrl, Tabulated):
        g = ctrl.grid
        moves = []
        for idx in enumeration_candidates(ctrl, x, ebox):
            delta = g.point(idx) - x
            for d in range(g.ndim):
                if g.periodic[d]:
                    period = g.hi[d] - g.lo[d]
                    delta[d] = (delta[d] + 0.5 * period) % period - 0.5 * period
            moves.append(np.clip(delta, -ebox, ebox))
        return moves
    # box corners; axes with a zero half-width collapse
    spans = [(-b, b) if b > 0 else (0.0,) for b in ebox]
    return [np.array(c) for c in itertools.product(*spans)]


def _pick_adversary(model: ClosedLoopModel, x, grad, t_dark: float,
                    stats: EvalStats | None):
    """(e, d, u, flow) minimizing grad . f(x, pi(x+e), d) over the arm's
    candidate errors and the disturbance box corners."""
    best = None
    for e in _error_moves(model, x, grad, t_dark, stats):
        u = eval_controller(model.controller, x + e, stats)
        for d in _disturbance_corners(model.dynamics):
            f = model.dynamics.flow(x, u, d)
            val = float(grad @ f)
            if best is None or val < best[0]:
                best = (val, e, d, u, f)
    return best[1], best[2], best[3], best[4]


# === rollouts ===============================================================

def _march(vf: ValueField, model: ClosedLoopModel, x0, t0: float,
           choose, stats: EvalStats, substeps: int = 1) -> Trajectory:
    g = vf.grid
    if model.dynamics.state_dim != g.ndim:
        raise ValueError(f"model state dim {model.dynamics.state_dim} != "
                         f"grid dim {g.ndim}")
    if substeps < 1 or substeps != int(substeps):
        raise ValueError(f"substeps must be a positive integer, got {substeps}")
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (g.ndim,):
        raise ValueError(f"start state shape {x.shape}, expected ({g.ndim},)")
    if not (vf.t0 - 1e-9 <= t0 <= vf.T + 1e-9):
        raise ValueError(f"start time {t0} outside horizon [{vf.t0}, {vf.T}]")
    if not _in_domain(g, x):
        raise ValueError(f"start state {x} outside the grid")

    dt = vf.dt / substeps
    n_steps = 0 if dt == 0.0 else int(round((vf.T - t0) / vf.dt)) * substeps
    lfield = ScalarField(grid=g, values=vf.failure)

    states = [x.copy()]
    l_vals = [interpolate(lfield, x, stats)]
    perceived, controls, errors, dists = [], [], [], []
    truncated = False
    for k in range(n_steps):
        s = t0 + k * dt
        e, d, u, f = choose(x, s)
        xn = x + dt * f
        if not _in_domain(g, xn):
            truncated = True
            stats.truncated_rollouts += 1
            break
        perceived.append(x + e)
        controls.append(u)
        errors.append(e)
        dists.append(d)
        x = xn
        states.append(x.copy())
        l_vals.append(interpolate(lfield, x, stats))

    kept = len(states) - 1
    n = g.ndim
    m = model.dynamics.control_dim
    box = model.dynamics.disturbance_box
    d_arr = None
    if box is not None:
        d_arr = np.array(dists, dtype=np.float64).reshape(
            kept, len(np.atleast_1d(box[0])))
    return Trajectory(
        times=t0 + dt * np.arange(kept + 1),
        states=np.array(states),
        perceived=np.array(perceived).reshape(kept, n),
        controls=np.array(controls).reshape(kept, m),
        errors=np.array(errors).reshape(kept, n),
        l_values=np.array(l_vals),
        truncated=truncated,
        disturbances=d_arr,
    )


def worst_case_rollout(vf: ValueField, model: ClosedLoopModel, x0,
                       t0: float | None = None,
                       stats: EvalStats | None = None,
                       substeps: int = 1) -> Trajectory:
    """Roll out with the adversary replanned every step from the value
    gradient.  A start with enough signed value slack should keep (or break)
    safety accordingly; see the module tests for the tolerance bookkeeping.

    ``substeps`` divides the solver step.  Leave it at 1 for the march
    aligned with the solve; raise it when the controller switches between
    grid cells faster than the solver step resolves, where a zero-order hold
    on the control can cut corners no admissible trajectory cuts."""
    if stats is None:
        stats = EvalStats()
    t0 = vf.t0 if t0 is None else float(t0)

    def choose(x, s):
        grad = value_gradient(vf, x, s, stats)
        return _pick_adversary(model, x, grad, max(vf.T - s, 0.0), stats)

    return _march(vf, model, x0, t0, choose, stats, substeps)


def nominal_rollout(vf: ValueField, model: ClosedLoopModel, x0,
                    t0: float | None = None,
                    stats: EvalStats | None = None,
                    substeps: int = 1) -> Trajectory:
    """Roll out with zero estimate error; disturbances sit at the box
    midpoint when the dynamics carry one."""
    if stats is None:
        stats = EvalStats()
    t0 = vf.t0 if t0 is None else float(t0)
    n = model.dynamics.state_dim
    box = model.dynamics.disturbance_box
    d_mid = None if box is None else 0.5 * (np.asarray(box[0], dtype=np.float64)
                                            + np.asarray(box[1], dtype=np.float64))
    e0 = np.zeros(n)

    def choose(x, s):
        u = eval_controller(model.controller, x + e0, stats)
        return e0, d_mid, u, model.dynamics.flow(x, u, d_mid)

    return _march(vf, model, x0, t0, choose, stats, substeps)


# === Monte Carlo baseline ===================================================

def _failure_batch(failure, X: np.ndarray) -> np.ndarray:
    if isinstance(failure, SlabKeepout):
        return failure.magnitude - np.abs(X[:, failure.dim])
    if isinstance(failure, CircularObstacles):
        d = np.hypot(X[:, None, 0] - failure.centers[:, 0],
                     X[:, None, 1] - failure.centers[:, 1]) - failure.radii
        return d.min(axis=1)
    return np.array([failure.l_point(row) for row in X])


def monte_carlo_min_l(model: ClosedLoopModel, failure, x0, t0: float,
                      T: float, samples: int, seed: int,
                      dt: float, domain: Grid | None = None) -> np.ndarray:
    """Per-sample worst failure level under uniformly drawn error signals.

    Each sample draws its errors (and disturbances) piecewise-constant per
    step from its own deterministic substream, so sample k's path does not
    depend on how many samples run alongside it.  The horizon is split into
    ceil((T - t0) / dt) equal steps.

    With a `domain` grid, a sample freezes the step before it would leave the
    non-periodic extent, the same cut `worst_case_rollout` applies.  Use this
    when comparing against a value field solved on that grid; a field knows
    nothing about excursions past its own edges.
    """
    if samples < 1:
        raise ValueError(f"need at least one sample, got {samples}")
    if T < t0:
        raise ValueError(f"need t0 <= T, got t0={t0}, T={T}")
    n = model.dynamics.state_dim
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (n,):
        raise ValueError(f"start state shape {x0.shape}, expected ({n},)")

    horizon = T - t0
    if horizon == 0.0:
        n_steps = 0
    else:
        if dt <= 0:
            raise ValueError(f"step must be positive, got {dt}")
        n_steps = int(np.ceil(horizon / dt - 1e-9))
    dt_eff = 0.0 if n_steps == 0 else horizon / n_steps

    box = model.dynamics.disturbance_box
    if box is not None:
        d_lo, d_hi = (np.asarray(b, dtype=np.float64) for b in box)
    # per-sample substreams: unit error draws first, then disturbance draws
    unit_e = np.empty((samples, n_steps, n))
    unit_d = np.empty((samples, n_steps, len(d_lo))) if box is not None else None
    for k in range(samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(k,)))
        unit_e[k] = rng.uniform(-1.0, 1.0, (n_steps, n))
        if box is not None:
            unit_d[k] = rng.uniform(0.0, 1.0, (n_steps, len(d_lo)))

    if domain is not None and domain.ndim != n:
        raise ValueError(f"domain dim {domain.ndim} != state dim {n}")
    X = np.broadcast_to(x0, (samples, n)).copy()
    worst = _failure_batch(failure, X)
    alive = np.ones(samples, dtype=bool)
    for j in range(n_steps):
        ebox = model.error.at(max(T - (t0 + j * dt_eff), 0.0))
        E = unit_e[:, j, :] * ebox
        U = eval_controller_batch(model.controller, X + E)
        D = None if box is None else d_lo + (d_hi - d_lo) * unit_d[:, j, :]
        Xn = X + dt_eff * model.dynamics.flow_batch(X, U, D)
        if domain is None:
            X = Xn
        else:
            alive &= _in_domain_batch(domain, Xn)
            if not alive.any():
                break
            # frozen samples re-score their last in-domain state, a no-op
            X = np.where(alive[:, None], Xn, X)
        np.minimum(worst, _failure_batch(failure, X), out=worst)
    return worst


def monte_carlo_value(model: ClosedLoopModel, failure, x0, t0: float,
                      T: float, samples: int, seed: int, dt: float,
                      domain: Grid | None = None) -> float:
    """Minimum failure level over all sampled rollouts; an optimistic
    (upper) estimate of the verified worst case."""
    return float(monte_carlo_min_l(model, failure, x0, t0, T,
                                   samples, seed, dt, domain).min())


# === trajectory export ======================================================

def write_trajectory_csv(traj: Trajectory, path_or_file) -> None:
    """One row per stored state: time, state, perceived, control, error,
    failure level (and lights flag when present).  Per-step columns are empty
    on the final row."""
    if not hasattr(path_or_file, "write"):
        with open(path_or_file, "w", newline="") as f:
            write_trajectory_csv(traj, f)
        return
    f = path_or_file
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    cols = ["t"]
    cols += [f"x{i}" for i in range(n)]
    cols += [f"xhat{i}" for i in range(n)]
    cols += [f"u{i}" for i in range(m)]
    cols += [f"e{i}" for i in range(n)]
    cols.append("l")
    if traj.lights is not None:
        cols.append("lights")
    f.write(",".join(cols) + "\n")
    for k in range(len(traj.states)):
        row = [repr(float(traj.times[k]))]
        row += [repr(float(v)) for v in traj.states[k]]
        step = k < traj.n_steps
        row += [repr(float(v)) for v in traj.perceived[k]] if step else [""] * n
        row += [repr(float(v)) for v in traj.controls[k]] if step else [""] * m
        row += [repr(float(v)) for v in traj.errors[k]] if step else [""] * n
        row.append(repr(float(traj.l_values[k])))
        if traj.lights is not None:
            row.append(str(int(traj.lights[k])) if step else "")
        f.write(",".join(row) + "\n")
