"""Closed-loop Hamiltonians: worst case of grad . f(x, pi(x+e), d).

The adversary picks the estimate error (and disturbance, when the dynamics
carry one), so every arm minimizes.  Three interchangeable arms:

  * ExactTanProportional: the tangent-of-affine steering law.  tan is monotone
    in its argument, so the worst error sits at a box corner with a closed
    form selected by the sign of the heading costate.
  * ExactEnumerated: tabulated controller.  The reachable controls form a
    finite candidate set; minimize over it directly.
  * IntervalBounded: control-affine dynamics with per-cell control intervals.
    Sound lower bound of the true Hamiltonian; coincides with the exact value
    for a scalar control whose interval endpoints are attained.

Each arm prepares a vectorized whole-grid evaluator for the solver, which also
carries the per-axis dissipation coefficients for the Lax-Friedrichs scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import ControlBoundsField, build_bounds_field
from .grid import EvalStats, Grid
from .models import (
    ClosedLoopModel,
    Dubins3D,
    Tabulated,
    TanProportional,
    TAN_CLAMP,
    _disturbance_corners,
)


# === arm configuration ======================================================

@dataclass(frozen=True)
class ExactTanProportional:
    model: ClosedLoopModel

    def __post_init__(self):
        if not isinstance(self.model.controller, TanProportional):
            raise ValueError("exact tangent arm needs a TanProportional controller")
        if not isinstance(self.model.dynamics, Dubins3D):
            raise ValueError("exact tangent arm assumes unicycle dynamics")


@dataclass(frozen=True)
class ExactEnumerated:
    model: ClosedLoopModel

    def __post_init__(self):
        if not isinstance(self.model.controller, Tabulated):
            raise ValueError("enumerated arm needs a Tabulated controller")
        if not self.model.dynamics.control_affine:
            raise ValueError(
                "grid sweeps reduce enumeration to control intervals, which "
                "needs control-affine dynamics")


@dataclass(frozen=True)
class IntervalBounded:
    dynamics: object
    bounds: ControlBoundsField

    def __post_init__(self):
        if not self.dynamics.control_affine:
            raise ValueError("interval arm needs control-affine dynamics")
        if self.bounds.control_dim != self.dynamics.control_dim:
            raise ValueError(
                f"bounds carry {self.bounds.control_dim} controls, dynamics "
                f"take {self.dynamics.control_dim}")


# === pointwise evaluation (rollout adversary, oracles) ======================

def ham_exact_tan(model: ClosedLoopModel, x, grad, t_dark: float = 0.0,
                  stats: EvalStats | None = None):
    """Worst-case Hamiltonian for the tangent steering law, with the
    minimizing error.  Heading costate of zero ties; ties resolve to e* = 0."""
    ctrl: TanProportional = model.controller
    v = model.dynamics.v
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    ebox = model.error.at(t_dark)
    b3 = grad[2]
    e_star = np.zeros(model.dynamics.state_dim)
    e_star[0] = -np.sign(b3 * ctrl.a) * ebox[0]
    e_star[2] = -np.sign(b3 * ctrl.b) * ebox[2]
    arg = ctrl.a * (x[0] + e_star[0]) + ctrl.b * (x[2] + e_star[2])
    if abs(arg) > TAN_CLAMP:
        if stats is not None:
            stats.tan_clamps += 1
        arg = np.clip(arg, -TAN_CLAMP, TAN_CLAMP)
    value = grad[0] * v * np.sin(x[2]) + grad[1] * v * np.cos(x[2]) \
        + b3 * np.tan(arg)
    return float(value), e_star


def ham_exact_enumerated(model: ClosedLoopModel, x, grad, candidates):
    """Min of grad . f(x, u, d) over the finite candidate controls (and
    disturbance box corners); returns the minimizing control as witness."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if len(cands) == 0:
        raise RuntimeError("empty candidate control set")
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    best = np.inf
    u_star = None
    X = np.broadcast_to(x, (len(cands), len(x)))
    for d in _disturbance_corners(model.dynamics):
        D = None if d is None else np.broadcast_to(d, (len(cands), len(d)))
        vals = model.dynamics.flow_batch(X, cands, D) @ grad
        k = int(np.argmin(vals))
        if vals[k] < best:
            best = float(vals[k])
            u_star = cands[k].copy()
    return best, u_star


def ham_lower_bound(dyn, x, grad, ubox) -> float:
    """Min of grad . f(x, u, d) over the control box (and disturbance
    corners); the minimizer of an affine-in-u flow sits at a box corner picked
    per control by the sign of its gradient coefficient."""
    if not dyn.control_affine:
        raise ValueError("interval lower bound needs control-affine dynamics")
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    ulo = np.atleast_1d(np.asarray(ubox[0], dtype=np.float64))
    uhi = np.atleast_1d(np.asarray(ubox[1], dtype=np.float64))
    zero = np.zeros(dyn.control_dim)
    best = np.inf
    for d in _disturbance_corners(dyn):
        base = float(grad @ dyn.flow(x, zero, d))
        val = base
        for j in range(dyn.control_dim):
            unit = np.zeros(dyn.control_dim)
            unit[j] = 1.0
            cj = float(grad @ dyn.flow(x, unit, d)) - base
            val += min(cj * ulo[j], cj * uhi[j])
        best = min(best, val)
    return best


# === vectorized grid evaluators =============================================

class _TanGridEval:
    """Whole-grid tangent-arm evaluation with cached angle and gain fields."""

    def __init__(self, spec: ExactTanProportional, grid: Grid, t_dark_max: float):
        m = spec.model
        self.error = m.error
        self.a = m.controller.a
        self.b = m.controller.b
        v = m.dynamics.v
        th = grid.axis(2).reshape((1, 1, -1))
        self.vsin = v * np.sin(th)
        self.vcos = v * np.cos(th)
        px = grid.axis(0).reshape((-1, 1, 1))
        self.base = self.a * px + self.b * th
        ebox = self.error.at(t_dark_max)
        s_max = abs(self.a) * ebox[0] + abs(self.b) * ebox[2]
        lo = np.clip(self.base.min() - s_max, -TAN_CLAMP, TAN_CLAMP)
        hi = np.clip(self.base.max() + s_max, -TAN_CLAMP, TAN_CLAMP)
        self.alphas = np.array([v, v, max(abs(np.tan(lo)), abs(np.tan(hi)))])

    def _spread(self, t_dark: float) -> float:
        ebox = self.error.at(t_dark)
        return abs(self.a) * ebox[0] + abs(self.b) * ebox[2]

    def evaluate(self, p, t_dark: float = 0.0,
                 stats: EvalStats | None = None) -> np.ndarray:
        arg = self.base - np.sign(p[2]) * self._spread(t_dark)
        if stats is not None:
            stats.tan_clamps += int(np.count_nonzero(np.abs(arg) > TAN_CLAMP))
        np.clip(arg, -TAN_CLAMP, TAN_CLAMP, out=arg)
        return p[0] * self.vsin + p[1] * self.vcos + p[2] * np.tan(arg)


class _IntervalGridEval:
    """Whole-grid interval-arm evaluation with cached drift and control
    coefficient fields per disturbance corner."""

    def __init__(self, dynamics, bounds: ControlBoundsField, grid: Grid):
        if not bounds.grid.compatible(grid):
            raise ValueError("control bounds live on a different grid")
        self.bounds = bounds
        n, m = grid.ndim, dynamics.control_dim
        mesh = np.meshgrid(*[grid.axis(d) for d in range(n)], indexing="ij")
        X = np.stack([a.ravel() for a in mesh], axis=1)
        zero = np.zeros((len(X), m))
        self.corners = []
        for d in _disturbance_corners(dynamics):
            D = None if d is None else np.broadcast_to(d, (len(X), len(d)))
            drift = dynamics.flow_batch(X, zero, D)
            coef = np.empty((len(X), n, m))
            for j in range(m):
                unit = zero.copy()
                unit[:, j] = 1.0
                coef[:, :, j] = dynamics.flow_batch(X, unit, D) - drift
            shape = tuple(grid.shape)
            self.corners.append((drift.reshape(shape + (n,)),
                                 coef.reshape(shape + (n, m))))
        # |dH/dp_i| <= max |f_i(x, u)| over each node's own control interval;
        # affine in u, so scan the interval corners per node (and dark time)
        n_t = 1 if bounds.tprimes is None else len(bounds.tprimes)
        L = bounds.lower.reshape((n_t, -1, m))
        U = bounds.upper.reshape((n_t, -1, m))
        worst = np.zeros(n)
        for drift, coef in self.corners:
            dflat = drift.reshape(-1, n)
            cflat = coef.reshape(-1, n, m)
            for k in range(n_t):
                for mask in range(1 << m):
                    pick = [(mask >> j) & 1 for j in range(m)]
                    u = np.where(pick, U[k], L[k])
                    f = dflat + np.einsum("inm,im->in", cflat, u)
                    worst = np.maximum(worst, np.abs(f).max(axis=0))
        self.alphas = worst

    def evaluate(self, p, t_dark: float = 0.0,
                 stats: EvalStats | None = None) -> np.ndarray:
        lo, hi = self.bounds.at(t_dark if self.bounds.tprimes is not None else None)
        H = None
        for drift, coef in self.corners:
            val = sum(drift[..., i] * p[i] for i in range(len(p)))
            cj = sum(coef[..., i, :] * p[i][..., None] for i in range(len(p)))
            val = val + np.minimum(cj * lo, cj * hi).sum(axis=-1)
            H = val if H is None else np.minimum(H, val)
        return H


def prepare(spec, grid: Grid, tprimes=None):
    """Build the grid evaluator for an arm.  ``tprimes`` are the dark-time
    samples a growing error bound is evaluated at (ignored for static ones);
    the dissipation coefficients cover the full sampled range."""
    if isinstance(spec, ExactTanProportional):
        t_max = 0.0 if spec.model.error.is_static or tprimes is None \
            else float(np.max(tprimes))
        return _TanGridEval(spec, grid, t_max)
    if isinstance(spec, ExactEnumerated):
        tp = None if spec.model.error.is_static else tprimes
        bounds = build_bounds_field(spec.model, grid, tprimes=tp)
        return _IntervalGridEval(spec.model.dynamics, bounds, grid)
    if isinstance(spec, IntervalBounded):
        return _IntervalGridEval(spec.dynamics, spec.bounds, grid)
    raise TypeError(f"unknown hamiltonian spec {type(spec).__name__}")


def dissipation_coeffs(spec, grid: Grid, tprimes=None) -> np.ndarray:
    """Per-axis bounds on |dH/dgrad_i| over the grid (and sampled dark times)."""
    return prepare(spec, grid, tprimes=tprimes).alphas
