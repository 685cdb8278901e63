"""Closed-loop model pieces: dynamics, controller arms, and error boxes.

The closed loop is ``xdot = f(x, pi(x + e), d)`` where ``e`` is the estimate
error (additive on the true state), ``pi`` is a fixed controller, and ``d`` an
optional disturbance.  Everything here is plain data so models pickle cleanly
for parallel sweeps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .grid import EvalStats, Grid, _read_exact

TAN_CLAMP = np.pi / 2 - 1e-6  # argument clamp for the tangent controller

_ACT_TAGS = {None: 0, "relu": 1, "tanh": 2}
_ACT_NAMES = {v: k for k, v in _ACT_TAGS.items()}


# === dynamics ===============================================================

@dataclass(frozen=True)
class Dubins3D:
    """Unicycle at fixed speed: state (px, py, heading), control = turn rate."""

    v: float
    state_dim: int = 3
    control_dim: int = 1
    control_affine: bool = True
    disturbance_box: tuple | None = None

    def __post_init__(self):
        if self.v <= 0:
            raise ValueError(f"speed must be positive, got {self.v}")

    def flow(self, x, u, d=None):
        x = np.asarray(x, dtype=np.float64)
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        return np.array([self.v * np.sin(x[2]), self.v * np.cos(x[2]), u[0]])

    def flow_batch(self, X, U, D=None):
        X = np.asarray(X, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        out = np.empty_like(X)
        out[:, 0] = self.v * np.sin(X[:, 2])
        out[:, 1] = self.v * np.cos(X[:, 2])
        out[:, 2] = U[:, 0]
        return out

    def speed_bounds(self, grid: Grid, control_lo, control_hi, d_box=None):
        # per-axis bound on |xdot|; for the heading axis the turn-rate extremes
        umax = float(max(abs(np.min(control_lo)), abs(np.max(control_hi))))
        return np.array([self.v, self.v, umax])


@dataclass(frozen=True)
class CustomDynamics:
    """User-supplied dynamics for tests and small studies.

    ``fn(x, u, d) -> xdot``; ``batch_fn`` (optional) maps (N,n),(N,m) arrays.
    ``speed_fn(grid, control_lo, control_hi, d_box)`` may supply exact per-axis
    rate bounds; otherwise a corner scan over grid nodes is used, which is
    exact only when extremes sit on nodes and box corners.
    """

    state_dim: int
    control_dim: int
    fn: object
    batch_fn: object = None
    control_affine: bool = False
    disturbance_box: tuple | None = None
    speed_fn: object = None

    def flow(self, x, u, d=None):
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64),
                                  np.atleast_1d(np.asarray(u, dtype=np.float64)), d),
                          dtype=np.float64)

    def flow_batch(self, X, U, D=None):
        if self.batch_fn is not None:
            return np.asarray(self.batch_fn(X, U, D), dtype=np.float64)
        out = np.empty((len(X), self.state_dim))
        for k in range(len(X)):
            out[k] = self.flow(X[k], U[k], None if D is None else D[k])
        return out

    def speed_bounds(self, grid: Grid, control_lo, control_hi, d_box=None):
        if self.speed_fn is not None:
            return np.asarray(self.speed_fn(grid, control_lo, control_hi, d_box),
                              dtype=np.float64)
        return _scan_speed_bounds(self, grid, control_lo, control_hi, d_box)


def _scan_speed_bounds(dyn, grid: Grid, control_lo, control_hi, d_box):
    """Max |xdot_i| over grid nodes x control-box corners (x disturbance corners)."""
    mesh = np.meshgrid(*[grid.axis(d) for d in range(grid.ndim)], indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    lo = np.broadcast_to(np.asarray(control_lo, dtype=np.float64), X.shape[:1] + (dyn.control_dim,)) \
        if np.ndim(control_lo) <= 1 else np.asarray(control_lo, dtype=np.float64).reshape(len(X), -1)
    hi = np.broadcast_to(np.asarray(control_hi, dtype=np.float64), X.shape[:1] + (dyn.control_dim,)) \
        if np.ndim(control_hi) <= 1 else np.asarray(control_hi, dtype=np.float64).reshape(len(X), -1)
    best = np.zeros(dyn.state_dim)
    for mask in range(1 << dyn.control_dim):
        U = np.where([(mask >> j) & 1 for j in range(dyn.control_dim)], hi, lo)
        for d in _disturbance_corners(dyn):
            D = None if d is None else np.broadcast_to(d, (len(X), len(d)))
            F = dyn.flow_batch(X, U, D)
            best = np.maximum(best, np.abs(F).max(axis=0))
    return best


def _disturbance_corners(dyn):
    box = dyn.disturbance_box
    if box is None:
        return [None]
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    corners = []
    for mask in range(1 << len(lo)):
        corners.append(np.where([(mask >> j) & 1 for j in range(len(lo))], hi, lo))
    return corners


# === controllers ============================================================

@dataclass(frozen=True)
class TanProportional:
    """u = tan(a * px_hat + b * heading_hat), gains non-positive.

    The tangent argument is clamped to +-(pi/2 - 1e-6); clamps are counted in
    the stats sink so saturated gain sweeps are visible in run metadata.
    """

    a: float
    b: float

    def __post_init__(self):
        if self.a > 0 or self.b > 0:
            raise ValueError(f"gains must be <= 0, got a={self.a}, b={self.b}")

    input_dim: int = 3
    control_dim: int = 1


@dataclass(frozen=True)
class Tabulated:
    """One control vector per grid cell, nearest-node lookup.

    Lookups clamp to the grid on non-periodic axes and wrap on periodic ones.
    Midpoint ties round toward the lower index.  Entries must lie inside the
    declared control box.
    """

    grid: Grid
    table: np.ndarray
    control_lo: np.ndarray
    control_hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.control_lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.control_hi, dtype=np.float64))
        t = np.ascontiguousarray(self.table, dtype=np.float64)
        if t.ndim == self.grid.ndim:
            t = t[..., None]
        if t.shape != tuple(self.grid.shape) + (len(lo),):
            raise ValueError(
                f"table shape {t.shape} != grid shape {self.grid.shape} + ({len(lo)},)")
        if len(lo) != len(hi) or np.any(lo > hi):
            raise ValueError("control box must satisfy lo <= hi")
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            bad = np.argwhere((t < lo - 1e-12) | (t > hi + 1e-12))[0]
            raise ValueError(f"table entry at {tuple(bad)} outside control box")
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "control_lo", lo)
        object.__setattr__(self, "control_hi", hi)

    @property
    def input_dim(self):
        return self.grid.ndim

    @property
    def control_dim(self):
        return self.table.shape[-1]

    def nearest_index(self, xhat) -> tuple:
        """Nearest-node multi-index; ties round toward the lower index."""
        xhat = np.asarray(xhat, dtype=np.float64)
        idx = []
        for d in range(self.grid.ndim):
            n = self.grid.shape[d]
            s = (xhat[d] - self.grid.lo[d]) / self.grid.spacing[d]
            if self.grid.periodic[d]:
                i = int(np.ceil(s - 0.5)) % n
            else:
                i = int(np.ceil(min(max(s, 0.0), float(n - 1)) - 0.5))
                i = min(max(i, 0), n - 1)
            idx.append(i)
        return tuple(idx)


@dataclass(frozen=True)
class Mlp:
    """Fully connected net; layers are (W, b, activation) with activation in
    {None, 'relu', 'tanh'} applied after the affine map."""

    layers: tuple

    def __post_init__(self):
        norm = []
        prev = None
        for k, (W, b, act) in enumerate(self.layers):
            W = np.ascontiguousarray(W, dtype=np.float64)
            b = np.ascontiguousarray(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: W must be 2-d with matching bias")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"layer {k}: input dim {W.shape[1]} != previous output {prev}")
            if act not in _ACT_TAGS:
                raise ValueError(f"layer {k}: unknown activation {act!r}")
            prev = W.shape[0]
            norm.append((W, b, act))
        if not norm:
            raise ValueError("mlp needs at least one layer")
        object.__setattr__(self, "layers", tuple(norm))

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def control_dim(self):
        return self.layers[-1][0].shape[0]

    def forward(self, xhat: np.ndarray) -> np.ndarray:
        h = np.asarray(xhat, dtype=np.float64)
        for W, b, act in self.layers:
            h = h @ W.T + b
            if act == "relu":
                h = np.maximum(h, 0.0)
            elif act == "tanh":
                h = np.tanh(h)
        return h


# === error bound ============================================================

@dataclass(frozen=True)
class ErrorBound:
    """Element-wise half-widths of the estimate-error box.

    ``static``: constant box.  ``linear_growth``: box grows as rate * t_dark
    where t_dark is elapsed time since the estimate was last grounded.
    """

    mode: str
    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if self.mode not in ("static", "linear_growth"):
            raise ValueError(f"unknown error mode {self.mode!r}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("error bound entries must be finite and >= 0")
        object.__setattr__(self, "values", v)

    @classmethod
    def static(cls, bound):
        return cls(mode="static", values=np.asarray(bound, dtype=np.float64))

    @classmethod
    def linear_growth(cls, rates):
        return cls(mode="linear_growth", values=np.asarray(rates, dtype=np.float64))

    @property
    def is_static(self) -> bool:
        return self.mode == "static"

    def at(self, t_dark: float = 0.0) -> np.ndarray:
        if self.is_static:
            return self.values
        if t_dark < 0:
            raise ValueError(f"dark time must be >= 0, got {t_dark}")
        return self.values * t_dark


# === closed loop ============================================================

@dataclass(frozen=True)
class ClosedLoopModel:
    """Dynamics + fixed controller + error box, wired as f(x, pi(x+e), d)."""

    dynamics: object
    controller: object
    error: ErrorBound

    def __post_init__(self):
        n = self.dynamics.state_dim
        if self.controller.input_dim != n:
            raise ValueError(
                f"controller input dim {self.controller.input_dim} != state dim {n}")
        if len(self.error.values) != n:
            raise ValueError(
                f"error bound has {len(self.error.values)} entries, state dim is {n}")
        if self.controller.control_dim != self.dynamics.control_dim:
            raise ValueError(
                f"controller emits {self.controller.control_dim} controls, "
                f"dynamics takes {self.dynamics.control_dim}")


# === evaluation ops =========================================================

def eval_dynamics(dynamics, x, u, d=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if x.shape != (dynamics.state_dim,):
        raise ValueError(f"state shape {x.shape}, expected ({dynamics.state_dim},)")
    if u.shape != (dynamics.control_dim,):
        raise ValueError(f"control shape {u.shape}, expected ({dynamics.control_dim},)")
    if d is not None and dynamics.disturbance_box is None:
        raise ValueError("dynamics takes no disturbance input")
    return dynamics.flow(x, u, d)


def eval_controller(controller, xhat, stats: EvalStats | None = None) -> np.ndarray:
    """Controller output for a state estimate; returns a control vector."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.shape != (controller.input_dim,):
        raise ValueError(f"estimate shape {xhat.shape}, expected ({controller.input_dim},)")
    if isinstance(controller, TanProportional):
        arg = controller.a * xhat[0] + controller.b * xhat[2]
        if abs(arg) > TAN_CLAMP:
            if stats is not None:
                stats.tan_clamps += 1
            arg = np.clip(arg, -TAN_CLAMP, TAN_CLAMP)
        return np.array([np.tan(arg)])
    if isinstance(controller, Tabulated):
        return controller.table[controller.nearest_index(xhat)].copy()
    if isinstance(controller, Mlp):
        return controller.forward(xhat)
    raise TypeError(f"unknown controller type {type(controller).__name__}")


def eval_controller_batch(controller, xhat: np.ndarray,
                          stats: EvalStats | None = None) -> np.ndarray:
    """Controller outputs for a batch of estimates, shape (N, input_dim) ->
    (N, control_dim).  Matches :func:`eval_controller` row by row, including
    the nearest-node tie rule and the tangent clamp."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.ndim != 2 or xhat.shape[1] != controller.input_dim:
        raise ValueError(f"estimate batch shape {xhat.shape}, "
                         f"expected (N, {controller.input_dim})")
    if isinstance(controller, TanProportional):
        arg = controller.a * xhat[:, 0] + controller.b * xhat[:, 2]
        hot = np.abs(arg) > TAN_CLAMP
        if stats is not None:
            stats.tan_clamps += int(np.count_nonzero(hot))
        return np.tan(np.clip(arg, -TAN_CLAMP, TAN_CLAMP))[:, None]
    if isinstance(controller, Tabulated):
        g = controller.grid
        idx = []
        for d in range(g.ndim):
            n = g.shape[d]
            s = (xhat[:, d] - g.lo[d]) / g.spacing[d]
            if g.periodic[d]:
                i = np.ceil(s - 0.5).astype(np.int64) % n
            else:
                i = np.ceil(np.clip(s, 0.0, float(n - 1)) - 0.5).astype(np.int64)
                i = np.clip(i, 0, n - 1)
            idx.append(i)
        return controller.table[tuple(idx)]
    if isinstance(controller, Mlp):
        return controller.forward(xhat)
    return np.stack([eval_controller(controller, row, stats) for row in xhat])


def eval_closed_loop(model: ClosedLoopModel, x, e, d=None,
                     stats: EvalStats | None = None) -> np.ndarray:
    """Closed-loop flow at true state ``x`` under estimate error ``e``."""
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if e.shape != x.shape:
        raise ValueError(f"error shape {e.shape} != state shape {x.shape}")
    u = eval_controller(model.controller, x + e, stats)
    return eval_dynamics(model.dynamics, x, u, d)


# === weights / table files ==================================================

def write_mlp(mlp: Mlp, path_or_file) -> None:
    """Little-endian MLP weights: u32 layer count, then per layer u32 rows,
    u32 cols, f64 W row-major, f64 bias, u8 activation tag (0 none, 1 relu,
    2 tanh)."""
    if hasattr(path_or_file, "write"):
        f = path_or_file
        f.write(struct.pack("<I", len(mlp.layers)))
        for W, b, act in mlp.layers:
            f.write(struct.pack("<II", W.shape[0], W.shape[1]))
            f.write(W.astype("<f8").tobytes(order="C"))
            f.write(b.astype("<f8").tobytes())
            f.write(struct.pack("<B", _ACT_TAGS[act]))
    else:
        with open(path_or_file, "wb") as f:
            write_mlp(mlp, f)


def read_mlp(path_or_file) -> Mlp:
    if hasattr(path_or_file, "read"):
        f = path_or_file
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        if not (1 <= count <= 64):
            raise ValueError(f"implausible layer count {count}")
        layers = []
        for _ in range(count):
            rows, cols = struct.unpack("<II", _read_exact(f, 8))
            W = np.frombuffer(_read_exact(f, 8 * rows * cols), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(_read_exact(f, 8 * rows), dtype="<f8")
            (tag,) = struct.unpack("<B", _read_exact(f, 1))
            if tag not in _ACT_NAMES:
                raise ValueError(f"unknown activation tag {tag}")
            layers.append((W.copy(), b.copy(), _ACT_NAMES[tag]))
        return Mlp(layers=tuple(layers))
    with open(path_or_file, "rb") as f:
        return read_mlp(f)


TABLE_MAGIC = b"RVCT"


def write_table(ctrl: Tabulated, path_or_file) -> None:
    """Tabulated controller file: field-style header with magic ``RVCT`` plus
    a control-dim field, the control box, and the table block."""
    from .grid import FIELD_VERSION
    if hasattr(path_or_file, "write"):
        f = path_or_file
        g = ctrl.grid
        m = ctrl.control_dim
        f.write(struct.pack("<4sIII", TABLE_MAGIC, FIELD_VERSION, g.ndim, m))
        f.write(np.asarray(g.shape, dtype="<u4").tobytes())
        f.write(g.lo.astype("<f8").tobytes())
        f.write(g.hi.astype("<f8").tobytes())
        f.write(np.asarray(g.periodic, dtype="<u1").tobytes())
        f.write(ctrl.control_lo.astype("<f8").tobytes())
        f.write(ctrl.control_hi.astype("<f8").tobytes())
        f.write(ctrl.table.astype("<f8").tobytes(order="C"))
    else:
        with open(path_or_file, "wb") as f:
            write_table(ctrl, f)


def read_table(path_or_file) -> Tabulated:
    if hasattr(path_or_file, "read"):
        f = path_or_file
        magic, version, ndim, m = struct.unpack("<4sIII", _read_exact(f, 16))
        if magic != TABLE_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {TABLE_MAGIC!r}")
        if version != 1:
            raise ValueError(f"unsupported table version {version}")
        shape = tuple(np.frombuffer(_read_exact(f, 4 * ndim), dtype="<u4").astype(int))
        lo = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8")
        hi = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8")
        periodic = tuple(np.frombuffer(_read_exact(f, ndim), dtype="<u1").astype(bool))
        clo = np.frombuffer(_read_exact(f, 8 * m), dtype="<f8")
        chi = np.frombuffer(_read_exact(f, 8 * m), dtype="<f8")
        grid = Grid(lo=lo, hi=hi, shape=shape, periodic=periodic)
        count = grid.num_nodes * m
        table = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape + (m,))
        return Tabulated(grid=grid, table=table.copy(), control_lo=clo, control_hi=chi)
    with open(path_or_file, "rb") as f:
        return read_table(f)


# === config parsing =========================================================

def build_model(cfg: dict, base_dir=".") -> ClosedLoopModel:
    """Build a closed-loop model from a parsed config mapping.

    Expected keys: ``dynamics`` (name + parameters), ``controller`` (kind +
    parameters or a weights/table path), ``error`` (mode + values).
    """
    import os

    dyn_cfg = dict(cfg.get("dynamics") or {})
    name = dyn_cfg.pop("name", None)
    if name == "dubins3d":
        dynamics = Dubins3D(v=float(dyn_cfg.pop("v")))
    else:
        raise ValueError(f"unknown dynamics {name!r}")
    if dyn_cfg:
        raise ValueError(f"unknown dynamics keys: {sorted(dyn_cfg)}")

    ctl_cfg = dict(cfg.get("controller") or {})
    kind = ctl_cfg.pop("kind", None)
    if kind == "tan_proportional":
        controller = TanProportional(a=float(ctl_cfg.pop("a")), b=float(ctl_cfg.pop("b")))
    elif kind == "tabulated":
        controller = read_table(os.path.join(base_dir, ctl_cfg.pop("path")))
    elif kind == "mlp":
        controller = read_mlp(os.path.join(base_dir, ctl_cfg.pop("path")))
    else:
        raise ValueError(f"unknown controller kind {kind!r}")
    if ctl_cfg:
        raise ValueError(f"unknown controller keys: {sorted(ctl_cfg)}")

    err_cfg = dict(cfg.get("error") or {})
    mode = err_cfg.pop("mode", None)
    if mode == "static":
        error = ErrorBound.static(err_cfg.pop("bound"))
    elif mode == "linear_growth":
        error = ErrorBound.linear_growth(err_cfg.pop("rates"))
    else:
        raise ValueError(f"unknown error mode {mode!r}")
    if err_cfg:
        raise ValueError(f"unknown error keys: {sorted(err_cfg)}")

    return ClosedLoopModel(dynamics=dynamics, controller=controller, error=error)
