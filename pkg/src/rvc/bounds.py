"""Reachable control sets under bounded estimate error.

For a state ``x`` and error box ``|e| <= ebox``, the controller may see any
estimate in ``[x - ebox, x + ebox]``; this module bounds the resulting set of
control outputs, per grid cell, optionally indexed by elapsed dark time.

Tabulated controllers are bounded exactly by enumerating the table cells whose
nearest-node preimage intersects the estimate box (midpoint ties round toward
the lower index, matching the lookup).  MLPs are bounded by interval
propagation, which is sound and exact for purely affine nets.  The tangent
controller's output interval is exact because tan is monotone on the clamped
argument range.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .grid import Grid, _read_exact
from .models import (
    ClosedLoopModel,
    ErrorBound,
    Mlp,
    Tabulated,
    TanProportional,
    TAN_CLAMP,
)

BOUNDS_MAGIC = b"RVCB"
BOUNDS_VERSION = 1

_TIE_EPS = 1e-9  # index-unit fuzz when deciding window membership at exact ties


@dataclass(frozen=True)
class ControlBoundsField:
    """Per-cell control intervals on a grid, optionally per dark-time sample.

    ``lower``/``upper`` have shape ``(*grid.shape, m)`` when static or
    ``(n_t, *grid.shape, m)`` when ``tprimes`` is set (ascending samples of
    elapsed dark time).  Invariant: ``lower <= upper`` everywhere.
    """

    grid: Grid
    lower: np.ndarray
    upper: np.ndarray
    tprimes: np.ndarray | None = None

    def __post_init__(self):
        lo = np.ascontiguousarray(self.lower, dtype=np.float64)
        hi = np.ascontiguousarray(self.upper, dtype=np.float64)
        tp = self.tprimes
        if tp is not None:
            tp = np.ascontiguousarray(tp, dtype=np.float64)
            if tp.ndim != 1 or len(tp) < 1 or np.any(np.diff(tp) <= 0):
                raise ValueError("tprimes must be a strictly ascending 1-d array")
            want = (len(tp),) + tuple(self.grid.shape)
        else:
            want = tuple(self.grid.shape)
        if lo.shape[:-1] != want or lo.shape != hi.shape:
            raise ValueError(f"bounds shape {lo.shape} does not match grid/time layout {want}")
        if np.any(lo > hi + 1e-12):
            bad = np.argwhere(lo > hi + 1e-12)[0]
            raise ValueError(f"lower > upper at index {tuple(bad)}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "tprimes", tp)

    @property
    def control_dim(self) -> int:
        return self.lower.shape[-1]

    def slice_index(self, t_dark: float) -> int:
        """Smallest stored dark-time sample >= t_dark (conservative pick)."""
        if self.tprimes is None:
            raise ValueError("static bounds field has no dark-time axis")
        if t_dark > self.tprimes[-1] + 1e-9:
            raise ValueError(
                f"dark time {t_dark} beyond sampled range {self.tprimes[-1]}")
        i = int(np.searchsorted(self.tprimes, t_dark - 1e-12, side="left"))
        return min(i, len(self.tprimes) - 1)

    def at(self, t_dark: float | None = None):
        """(lower, upper) node arrays for one dark time (or the static pair)."""
        if self.tprimes is None:
            return self.lower, self.upper
        if t_dark is None:
            raise ValueError("time-varying bounds field needs a dark time")
        i = self.slice_index(t_dark)
        return self.lower[i], self.upper[i]

    def global_extremes(self):
        """Widest (lower, upper) per control dim across all cells and times."""
        m = self.control_dim
        return (self.lower.reshape(-1, m).min(axis=0),
                self.upper.reshape(-1, m).max(axis=0))


# === tabulated: exact enumeration ===========================================

def _axis_candidates(grid: Grid, d: int, x_d: float, e_d: float) -> np.ndarray:
    """Table indices along one axis whose lookup preimage meets the estimate
    interval.  The preimage of node j is (node_j - dx/2, node_j + dx/2] (ties
    round down), so membership is closed below and open above."""
    n = grid.shape[d]
    dx = grid.spacing[d]
    s = (x_d - grid.lo[d]) / dx
    s_lo = s - (e_d / dx + 0.5)
    s_hi = s + (e_d / dx + 0.5)
    j_min = int(np.ceil(s_lo - _TIE_EPS))
    j_max = int(np.ceil(s_hi - _TIE_EPS)) - 1
    if grid.periodic[d]:
        if j_max - j_min + 1 >= n:
            return np.arange(n)
        return np.mod(np.arange(j_min, j_max + 1), n)
    # clamped lookups fold everything past the edges onto the edge nodes
    j_min = min(max(j_min, 0), n - 1)
    j_max = min(max(j_max, 0), n - 1)
    return np.arange(j_min, j_max + 1)


def enumeration_candidates(ctrl: Tabulated, x, ebox) -> list:
    """Multi-indices of every table cell reachable under the error box."""
    x = np.asarray(x, dtype=np.float64)
    ebox = np.asarray(ebox, dtype=np.float64)
    per_axis = [_axis_candidates(ctrl.grid, d, x[d], ebox[d])
                for d in range(ctrl.grid.ndim)]
    return [tuple(int(i) for i in combo) for combo in itertools.product(*per_axis)]


def bounds_by_enumeration(ctrl: Tabulated, x, ebox):
    """Exact (lower, upper) control bounds at one state; attained by candidates."""
    cands = enumeration_candidates(ctrl, x, ebox)
    vals = np.array([ctrl.table[idx] for idx in cands])
    return vals.min(axis=0), vals.max(axis=0)


def _filter_window(e_d: float, dx: float):
    """(size, origin) of the index window for node-centered boxes.

    Window offsets are ceil(-w - eps) .. ceil(w - eps) - 1 with w = e/dx + 1/2;
    for non-integer w this is the symmetric +-floor(w), at exact integer w the
    upper side loses one cell (open-above preimage edge).
    """
    w = e_d / dx + 0.5
    lo_off = int(np.ceil(-w - _TIE_EPS))
    hi_off = int(np.ceil(w - _TIE_EPS)) - 1
    size = hi_off - lo_off + 1
    origin = lo_off + size // 2
    return size, origin


def _tabulated_slice(ctrl: Tabulated, ebox: np.ndarray):
    """(lower, upper) over all nodes of the controller's own grid, exact."""
    g = ctrl.grid
    lo = ctrl.table.copy()
    hi = ctrl.table.copy()
    for d in range(g.ndim):
        size, origin = _filter_window(float(ebox[d]), g.spacing[d])
        if size <= 1 and origin == 0:
            continue
        mode = "wrap" if g.periodic[d] else "nearest"
        lo = minimum_filter1d(lo, size=size, axis=d, mode=mode, origin=origin)
        hi = maximum_filter1d(hi, size=size, axis=d, mode=mode, origin=origin)
    return lo, hi


# === mlp: interval propagation ==============================================

def _collapsed_layers(mlp: Mlp) -> list:
    """Layers with runs of activation-free maps composed into one.

    Interval propagation through a product of affine maps is wider than
    through their composition (the intermediate box forgets coordinate
    couplings), so chains like W2(W1 x + b1) + b2 fold to a single layer
    first.  Nets with an activation after every layer pass through unchanged.
    """
    merged = []
    for W, b, act in mlp.layers:
        if merged and merged[-1][2] is None:
            Wp, bp, _ = merged[-1]
            merged[-1] = (W @ Wp, W @ bp + b, act)
        else:
            merged.append((W, b, act))
    return merged


def _ibp_batch(mlp: Mlp, lo: np.ndarray, hi: np.ndarray):
    """Propagate (N, in) interval batches through the net."""
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    for W, b, act in _collapsed_layers(mlp):
        c = c @ W.T + b
        r = r @ np.abs(W).T
        if act is not None:
            a = c - r
            z = c + r
            if act == "relu":
                a = np.maximum(a, 0.0)
                z = np.maximum(z, 0.0)
            else:  # tanh, monotone
                a = np.tanh(a)
                z = np.tanh(z)
            c = 0.5 * (a + z)
            r = 0.5 * (z - a)
    return c - r, c + r


def bounds_by_ibp(mlp: Mlp, box_lo, box_hi):
    """Sound (lower, upper) on MLP outputs over an input box; exact when the
    net is activation-free (affine runs collapse to a single map first)."""
    box_lo = np.atleast_1d(np.asarray(box_lo, dtype=np.float64))
    box_hi = np.atleast_1d(np.asarray(box_hi, dtype=np.float64))
    if box_lo.shape != box_hi.shape or np.any(box_lo > box_hi):
        raise ValueError("input box must satisfy lo <= hi")
    lo, hi = _ibp_batch(mlp, box_lo[None, :], box_hi[None, :])
    return lo[0], hi[0]


# === tangent controller: monotone image ====================================

def _tan_interval(ctrl: TanProportional, x, ebox):
    c = ctrl.a * x[0] + ctrl.b * x[2]
    r = abs(ctrl.a) * ebox[0] + abs(ctrl.b) * ebox[2]
    lo = np.tan(np.clip(c - r, -TAN_CLAMP, TAN_CLAMP))
    hi = np.tan(np.clip(c + r, -TAN_CLAMP, TAN_CLAMP))
    return np.array([lo]), np.array([hi])


# === field construction =====================================================

def _nodes_matrix(grid: Grid) -> np.ndarray:
    mesh = np.meshgrid(*[grid.axis(d) for d in range(grid.ndim)], indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _slice_bounds(controller, grid: Grid, ebox: np.ndarray):
    """(lower, upper) arrays shaped (*grid.shape, m) for one error box."""
    if isinstance(controller, Tabulated):
        if controller.grid.compatible(grid):
            return _tabulated_slice(controller, ebox)
        lo = np.empty(tuple(grid.shape) + (controller.control_dim,))
        hi = np.empty_like(lo)
        for idx in np.ndindex(*grid.shape):
            x = grid.point(idx)
            lo[idx], hi[idx] = bounds_by_enumeration(controller, x, ebox)
        return lo, hi
    if isinstance(controller, Mlp):
        X = _nodes_matrix(grid)
        lo, hi = _ibp_batch(mlp=controller, lo=X - ebox, hi=X + ebox)
        m = controller.control_dim
        return (lo.reshape(tuple(grid.shape) + (m,)),
                hi.reshape(tuple(grid.shape) + (m,)))
    if isinstance(controller, TanProportional):
        px = grid.axis(0).reshape((-1,) + (1,) * (grid.ndim - 1))
        th = grid.axis(2).reshape((1,) * 2 + (-1,) + (1,) * (grid.ndim - 3))
        c = controller.a * px + controller.b * th
        r = abs(controller.a) * ebox[0] + abs(controller.b) * ebox[2]
        lo = np.tan(np.clip(c - r, -TAN_CLAMP, TAN_CLAMP))
        hi = np.tan(np.clip(c + r, -TAN_CLAMP, TAN_CLAMP))
        shape = tuple(grid.shape) + (1,)
        return (np.broadcast_to(lo[..., None], shape).copy(),
                np.broadcast_to(hi[..., None], shape).copy())
    raise TypeError(f"cannot bound controller type {type(controller).__name__}")


def build_bounds_field(model: ClosedLoopModel, grid: Grid,
                       tprimes=None) -> ControlBoundsField:
    """Bound the controller output per grid cell.

    Static error boxes yield a single slice.  Growing boxes need ``tprimes``,
    the dark-time samples at which to evaluate the box; bounds are monotone
    (nested) along that axis because the boxes are.
    """
    err: ErrorBound = model.error
    if err.is_static and tprimes is None:
        lo, hi = _slice_bounds(model.controller, grid, err.at())
        return ControlBoundsField(grid=grid, lower=lo, upper=hi)
    if tprimes is None:
        raise ValueError("growing error bound needs dark-time samples")
    tprimes = np.asarray(tprimes, dtype=np.float64)
    los, his = [], []
    for tp in tprimes:
        lo, hi = _slice_bounds(model.controller, grid, err.at(float(tp)))
        los.append(lo)
        his.append(hi)
    return ControlBoundsField(grid=grid, lower=np.stack(los), upper=np.stack(his),
                              tprimes=tprimes)


# === binary format ==========================================================

def write_bounds(field: ControlBoundsField, path_or_file) -> None:
    """Bounds file (magic ``RVCB``): grid header plus control dim and dark-time
    samples, then the lower and upper blocks f64 row-major."""
    if hasattr(path_or_file, "write"):
        f = path_or_file
        g = field.grid
        n_t = 0 if field.tprimes is None else len(field.tprimes)
        f.write(struct.pack("<4sIIII", BOUNDS_MAGIC, BOUNDS_VERSION, g.ndim,
                            field.control_dim, n_t))
        f.write(np.asarray(g.shape, dtype="<u4").tobytes())
        f.write(g.lo.astype("<f8").tobytes())
        f.write(g.hi.astype("<f8").tobytes())
        f.write(np.asarray(g.periodic, dtype="<u1").tobytes())
        if n_t:
            f.write(field.tprimes.astype("<f8").tobytes())
        f.write(field.lower.astype("<f8").tobytes(order="C"))
        f.write(field.upper.astype("<f8").tobytes(order="C"))
    else:
        with open(path_or_file, "wb") as f:
            write_bounds(field, f)


def read_bounds(path_or_file) -> ControlBoundsField:
    """Read a bounds file; rejects inverted intervals with the offending cell."""
    if hasattr(path_or_file, "read"):
        f = path_or_file
        magic, version, ndim, m, n_t = struct.unpack("<4sIIII", _read_exact(f, 20))
        if magic != BOUNDS_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {BOUNDS_MAGIC!r}")
        if version != BOUNDS_VERSION:
            raise ValueError(f"unsupported bounds version {version}")
        shape = tuple(np.frombuffer(_read_exact(f, 4 * ndim), dtype="<u4").astype(int))
        lo = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8")
        hi = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8")
        periodic = tuple(np.frombuffer(_read_exact(f, ndim), dtype="<u1").astype(bool))
        grid = Grid(lo=lo, hi=hi, shape=shape, periodic=periodic)
        tprimes = None
        block = shape + (m,)
        if n_t:
            tprimes = np.frombuffer(_read_exact(f, 8 * n_t), dtype="<f8").copy()
            block = (n_t,) + block
        count = int(np.prod(block))
        lower = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(block)
        upper = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(block)
        return ControlBoundsField(grid=grid, lower=lower.copy(), upper=upper.copy(),
                                  tprimes=tprimes)
    with open(path_or_file, "rb") as f:
        return read_bounds(f)
