"""Backward solve of the safety value function on a grid.

V(x, T) = l(x); marching backward, each step applies a monotone
Lax-Friedrichs update with two-stage TVD-RK (Heun) time integration, then
clamps V <- min(V, l).  The clamp freezes value at the failure boundary, which
is the discrete form of the variational inequality: the value at (x, t) is the
worst l seen along the remaining horizon, so it can only decrease as the
horizon grows.

Marching toward smaller t with elapsed time tau = T - t, the update is

    V <- V + dtau * (H(avg grad) + sum_i alpha_i * (grad_i^+ - grad_i^-) / 2)

where the alpha term is the upwinding dissipation (positive: it diffuses).
alpha_i must dominate |dH/dgrad_i|; with dtau <= 1 / sum(alpha_i / dx_i) the
update is monotone in the neighbor values, which is what makes the stored
slices pointwise ordered in time.

Growing error bounds are indexed by elapsed dark time t' = T - t: the
adversary has had the longest blackout at the earliest times, which is the
conservative reading for a tube anchored at the horizon end.  Both Heun
stages of a step use the step's final t' (the larger box).

At non-periodic edges the one-sided gradient slot is frozen to the failure
level's own boundary slope (see _boundary_slopes); together with the clamps
this makes every update monotone in the neighbor values, so stored slices are
ordered in time exactly and two solves sharing alphas preserve pointwise
ordering when one error box contains the other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    EvalStats,
    Grid,
    ScalarField,
    fill_upwind,
    interpolate,
    read_field,
    write_field,
)
from .hamiltonian import prepare

VALUE_MAGIC = b"RVVF"
VALUE_VERSION = 1

_MAX_STEPS = 10_000_000


# === failure sets ===========================================================

@dataclass(frozen=True)
class SlabKeepout:
    """Failure when |x_dim| >= magnitude; l(x) = magnitude - |x_dim|."""

    dim: int
    magnitude: float

    def l_point(self, x) -> float:
        return self.magnitude - abs(float(np.asarray(x)[self.dim]))

    def l_grid(self, grid: Grid) -> np.ndarray:
        ax = self.magnitude - np.abs(grid.axis(self.dim))
        shape = [1] * grid.ndim
        shape[self.dim] = -1
        return np.broadcast_to(ax.reshape(shape), tuple(grid.shape)).copy()


@dataclass(frozen=True)
class CircularObstacles:
    """Signed distance in the first two state dims to a union of discs."""

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        r = np.atleast_1d(np.asarray(self.radii, dtype=np.float64))
        if c.shape != (len(r), 2):
            raise ValueError(f"centers shape {c.shape} does not match {len(r)} radii")
        if np.any(r <= 0):
            raise ValueError("radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def l_point(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        d = np.hypot(*(x[:2] - self.centers).T) - self.radii
        return float(d.min())

    def l_grid(self, grid: Grid) -> np.ndarray:
        px = grid.axis(0).reshape((-1,) + (1,) * (grid.ndim - 1))
        py = grid.axis(1).reshape((1, -1) + (1,) * (grid.ndim - 2))
        best = None
        for (cx, cy), r in zip(self.centers, self.radii):
            d = np.hypot(px - cx, py - cy) - r
            best = d if best is None else np.minimum(best, d)
        return np.broadcast_to(best, tuple(grid.shape)).copy()


@dataclass(frozen=True)
class ImportedField:
    """Failure level directly from a stored field on a matching grid."""

    field: ScalarField

    def l_point(self, x) -> float:
        return interpolate(self.field, np.asarray(x, dtype=np.float64))

    def l_grid(self, grid: Grid) -> np.ndarray:
        if not self.field.grid.compatible(grid):
            raise ValueError("imported failure field lives on a different grid")
        return self.field.values.copy()


def lipschitz_estimate(values: np.ndarray, grid: Grid) -> float:
    """Max finite-difference quotient over grid edges (per-axis one-sided)."""
    worst = 0.0
    for d in range(grid.ndim):
        diff = np.abs(np.diff(values, axis=d)) / grid.spacing[d]
        if diff.size:
            worst = max(worst, float(diff.max()))
        if grid.periodic[d]:
            seam = np.abs(np.take(values, 0, axis=d)
                          - np.take(values, -1, axis=d)) / grid.spacing[d]
            worst = max(worst, float(seam.max()))
    return worst


# === configuration and result ===============================================

@dataclass(frozen=True)
class SolveConfig:
    grid: Grid
    hamiltonian: object
    t0: float
    T: float
    cfl: float = 0.5
    save_stride: int | None = None
    max_store_mb: float = 256.0
    dark_time_samples: int = 51
    alphas_override: np.ndarray | None = None

    def __post_init__(self):
        if not (self.t0 <= self.T):
            raise ValueError(f"need t0 <= T, got t0={self.t0}, T={self.T}")
        if not (0.0 < self.cfl <= 1.0):
            raise ValueError(f"cfl must be in (0, 1], got {self.cfl}")
        if self.save_stride is not None and self.save_stride < 1:
            raise ValueError("save_stride must be >= 1")
        if self.dark_time_samples < 2:
            raise ValueError("need at least 2 dark-time samples")


@dataclass(frozen=True)
class ValueField:
    """Stored slices of the backward solve, descending in time.

    ``values[k]`` holds V(., times[k]); times[0] == T and times[-1] == t0.
    ``failure`` is l on the same grid.  Invariants: values[0] == failure,
    values <= failure everywhere, and values[k] >= values[k+1] pointwise.
    """

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    failure: np.ndarray
    alphas: np.ndarray
    dt: float
    stats: EvalStats = field(default_factory=EvalStats)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or (len(t) > 1 and np.any(np.diff(t) >= 0)):
            raise ValueError("times must be strictly descending")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(t),) + tuple(self.grid.shape):
            raise ValueError(f"values shape {v.shape} does not match times/grid")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def t0(self) -> float:
        return float(self.times[-1])

    @property
    def T(self) -> float:
        return float(self.times[0])

    def slice_field(self, k: int) -> ScalarField:
        return ScalarField(grid=self.grid, values=self.values[k])

    def final(self) -> np.ndarray:
        """V(., t0), the fully grown tube."""
        return self.values[-1]


def query_value(vf: ValueField, x, t: float,
                stats: EvalStats | None = None) -> float:
    """Multilinear in space, linear between the two bracketing stored slices."""
    if t < vf.t0 - 1e-9 or t > vf.T + 1e-9:
        raise ValueError(f"time {t} outside stored horizon [{vf.t0}, {vf.T}]")
    t = min(max(t, vf.t0), vf.T)
    x = np.asarray(x, dtype=np.float64)
    asc = vf.times[::-1]
    j = int(np.searchsorted(asc, t, side="left"))
    j = min(max(j, 0), len(asc) - 1)
    k = len(vf.times) - 1 - j  # slice at time >= t
    a = interpolate(vf.slice_field(k), x, stats)
    if vf.times[k] - t <= 1e-12:
        return a
    b = interpolate(vf.slice_field(k + 1), x, stats)
    w = (vf.times[k] - t) / (vf.times[k] - vf.times[k + 1])
    return (1.0 - w) * a + w * b


# === the march ==============================================================

def _boundary_slopes(l: np.ndarray, grid: Grid) -> list:
    """Frozen one-sided slopes of the failure level at non-periodic edges.

    Characteristics entering the domain need invented data; extrapolating the
    current V there makes the update non-monotone in the neighbor values
    (which is exactly where slice ordering can break).  Freezing the ghost
    slope to l's own boundary slope keeps the stage monotone and is exact for
    data that translates without changing shape.
    """
    out = []
    for d in range(grid.ndim):
        if grid.periodic[d]:
            out.append(None)
            continue
        dx = grid.spacing[d]
        lo = (np.take(l, 1, axis=d) - np.take(l, 0, axis=d)) / dx
        hi = (np.take(l, -1, axis=d) - np.take(l, -2, axis=d)) / dx
        out.append((lo, hi))
    return out


def _stage(V, dt, grid, ev, t_dark, alphas, work, stats):
    """One explicit update V + dt * (H(avg grad) + dissipation)."""
    p_avg, diss = work["p_avg"], work["diss"]
    diss.fill(0.0)
    for d in range(grid.ndim):
        fill_upwind(V, grid, d, work["pm"], work["pp"])
        if work["edge_slopes"][d] is not None:
            lo, hi = work["edge_slopes"][d]
            sl = [slice(None)] * grid.ndim
            sl[d] = 0
            work["pm"][tuple(sl)] = lo
            sl[d] = -1
            work["pp"][tuple(sl)] = hi
        np.subtract(work["pp"], work["pm"], out=work["tmp"])
        work["tmp"] *= 0.5 * alphas[d]
        diss += work["tmp"]
        np.add(work["pp"], work["pm"], out=p_avg[d])
        p_avg[d] *= 0.5
    H = ev.evaluate(p_avg, t_dark, stats)
    return V + dt * (H + diss)


def solve(model, failure, cfg: SolveConfig) -> ValueField:
    """March the value function from T back to t0 and store slices."""
    grid = cfg.grid
    l = failure.l_grid(grid)
    if not np.all(np.isfinite(l)):
        raise ValueError("failure level is not finite on the grid")

    horizon = cfg.T - cfg.t0
    tprimes = None
    if not model.error.is_static and horizon > 0:
        tprimes = np.linspace(0.0, horizon, cfg.dark_time_samples)
    ev = prepare(cfg.hamiltonian, grid, tprimes=tprimes)

    bounds = getattr(ev, "bounds", None)
    if bounds is not None and bounds.tprimes is not None \
            and bounds.tprimes[-1] < horizon - 1e-9:
        raise ValueError(
            f"control bounds sampled to dark time {bounds.tprimes[-1]}, "
            f"horizon needs {horizon}")

    alphas = np.asarray(ev.alphas, dtype=np.float64)
    if not np.all(np.isfinite(alphas)):
        raise ValueError(f"dissipation coefficients not finite: {alphas}")
    if cfg.alphas_override is not None:
        override = np.asarray(cfg.alphas_override, dtype=np.float64)
        if np.any(override < alphas - 1e-12):
            raise ValueError(
                f"alphas override {override} below required {alphas}")
        alphas = override

    denom = float(np.sum(alphas / grid.spacing))
    if horizon <= 0 or denom == 0.0:
        n_steps = 0 if horizon <= 0 else 1
    else:
        dt_cfl = cfg.cfl / denom
        # the max(1, .) guards near-zero dissipation (for example a frozen
        # plant whose rate bounds are pure float noise): one step still runs
        n_steps = max(1, int(np.ceil(horizon / dt_cfl - 1e-9)))
        if n_steps > _MAX_STEPS:
            raise ValueError(
                f"time step underflow: {n_steps} steps needed "
                f"(dissipation {alphas})")
    dt = 0.0 if n_steps == 0 else horizon / n_steps

    if cfg.save_stride is not None:
        stride = cfg.save_stride
    else:
        cap = max(int(cfg.max_store_mb * 2**20 // l.nbytes), 2)
        stride = max(1, int(np.ceil((n_steps + 1) / cap)))

    stats = EvalStats()
    shape = tuple(grid.shape)
    work = {
        "pm": np.empty(shape), "pp": np.empty(shape), "tmp": np.empty(shape),
        "diss": np.empty(shape), "p_avg": [np.empty(shape) for _ in range(grid.ndim)],
        "edge_slopes": _boundary_slopes(l, grid),
    }

    times = [cfg.T]
    stored = [l.copy()]
    V = l.copy()
    for k in range(n_steps):
        t_dark = (k + 1) * dt
        V1 = _stage(V, dt, grid, ev, t_dark, alphas, work, stats)
        V2 = _stage(V1, dt, grid, ev, t_dark, alphas, work, stats)
        # clamp against l (the variational inequality) and against the
        # previous slice: the exact value is non-increasing in horizon, and
        # the one-sided boundary stencil is the only place the discrete
        # update can drift upward
        V = np.minimum(np.minimum(0.5 * (V + V2), l), V)
        if not np.all(np.isfinite(V)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(V))[0])
            raise RuntimeError(f"non-finite value at step {k + 1}, cell {bad}")
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            times.append(cfg.T - (k + 1) * dt)
            stored.append(V.copy())

    times = np.asarray(times)
    times[-1] = cfg.t0  # kill accumulated roundoff at the anchor
    return ValueField(grid=grid, times=times, values=np.stack(stored),
                      failure=l, alphas=alphas, dt=dt, stats=stats)


# === container format =======================================================

def write_value_field(vf: ValueField, path_or_file) -> None:
    """Value container (magic ``RVVF``): solve metadata, then the failure
    level and every stored slice as plain field blocks."""
    if hasattr(path_or_file, "write"):
        f = path_or_file
        n = len(vf.times)
        f.write(struct.pack("<4sIII", VALUE_MAGIC, VALUE_VERSION, n, vf.grid.ndim))
        f.write(struct.pack("<d", vf.dt))
        f.write(vf.alphas.astype("<f8").tobytes())
        f.write(vf.times.astype("<f8").tobytes())
        write_field(ScalarField(grid=vf.grid, values=vf.failure), f)
        for k in range(n):
            write_field(vf.slice_field(k), f)
    else:
        with open(path_or_file, "wb") as f:
            write_value_field(vf, f)


def read_value_field(path_or_file) -> ValueField:
    if hasattr(path_or_file, "read"):
        f = path_or_file
        from .grid import _read_exact
        magic, version, n, ndim = struct.unpack("<4sIII", _read_exact(f, 16))
        if magic != VALUE_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {VALUE_MAGIC!r}")
        if version != VALUE_VERSION:
            raise ValueError(f"unsupported value container version {version}")
        dt, = struct.unpack("<d", _read_exact(f, 8))
        alphas = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8").copy()
        times = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").copy()
        fail = read_field(f)
        slices = [read_field(f) for _ in range(n)]
        for s in slices:
            if not s.grid.compatible(fail.grid):
                raise ValueError("slice grid differs from failure grid")
        return ValueField(grid=fail.grid, times=times,
                          values=np.stack([s.values for s in slices]),
                          failure=fail.values, alphas=alphas, dt=dt)
    with open(path_or_file, "rb") as f:
        return read_value_field(f)
