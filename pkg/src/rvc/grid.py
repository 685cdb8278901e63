"""Rectilinear grid primitives: geometry, interpolation, one-sided differences,
and field exchange (binary + CSV).

Conventions
-----------
Fields store one float64 per node, row-major (C order).  Axis ``d`` has
``shape[d]`` nodes.  Non-periodic axes place nodes on both endpoints, so the
spacing is ``(hi - lo) / (shape - 1)``.  Periodic axes exclude the ``hi``
endpoint (spacing ``(hi - lo) / shape``) so the seam is stored once; queries at
``hi`` wrap back to ``lo``.

Grids are immutable after construction and hold read-only coordinate arrays,
so they can be shared freely across worker processes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FIELD_MAGIC = b"RVCF"
FIELD_VERSION = 1

# Queries this far (in cells) past a non-periodic edge count as boundary hits,
# not clamps; keeps float fuzz at the domain edge off the warning path.
EDGE_SNAP_CELLS = 1e-9


@dataclass
class EvalStats:
    """Mutable counters surfaced in run metadata."""

    clamped_queries: int = 0
    tan_clamps: int = 0
    truncated_rollouts: int = 0

    def merge(self, other: "EvalStats") -> None:
        self.clamped_queries += other.clamped_queries
        self.tan_clamps += other.tan_clamps
        self.truncated_rollouts += other.truncated_rollouts

    def as_dict(self) -> dict:
        return {
            "clamped_queries": int(self.clamped_queries),
            "tan_clamps": int(self.tan_clamps),
            "truncated_rollouts": int(self.truncated_rollouts),
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Axis-aligned rectilinear grid.

    Parameters
    ----------
    lo, hi : array-like of float
        Domain bounds per axis; ``hi > lo`` required.
    shape : tuple of int
        Node count per axis, at least 3 each.
    periodic : tuple of bool
        Per-axis periodicity flags.
    """

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple
    periodic: tuple
    spacing: np.ndarray = field(init=False)

    def __post_init__(self):
        lo = _readonly(np.atleast_1d(self.lo))
        hi = _readonly(np.atleast_1d(self.hi))
        shape = tuple(int(n) for n in self.shape)
        periodic = tuple(bool(p) for p in self.periodic)
        if not (lo.ndim == 1 and hi.ndim == 1):
            raise ValueError("grid bounds must be 1-d")
        if not (len(lo) == len(hi) == len(shape) == len(periodic)):
            raise ValueError(
                f"grid arity mismatch: lo {len(lo)}, hi {len(hi)}, "
                f"shape {len(shape)}, periodic {len(periodic)}"
            )
        if any(n < 3 for n in shape):
            raise ValueError(f"every axis needs at least 3 nodes, got {shape}")
        if not np.all(hi > lo):
            raise ValueError("grid requires hi > lo on every axis")
        denom = np.array([n if p else n - 1 for n, p in zip(shape, periodic)], dtype=np.float64)
        spacing = _readonly((hi - lo) / denom)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "periodic", periodic)
        object.__setattr__(self, "spacing", spacing)
        axes = tuple(_readonly(lo[d] + spacing[d] * np.arange(shape[d]))
                     for d in range(len(shape)))
        object.__setattr__(self, "_axes", axes)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    def axis(self, d: int) -> np.ndarray:
        """Node coordinates along axis ``d`` (read-only)."""
        return self._axes[d]

    def point(self, index) -> np.ndarray:
        """Coordinates of the node at a multi-index."""
        index = tuple(int(i) for i in np.atleast_1d(index))
        if len(index) != self.ndim:
            raise ValueError(f"index arity {len(index)} != grid ndim {self.ndim}")
        for d, i in enumerate(index):
            if not (0 <= i < self.shape[d]):
                raise ValueError(f"index {i} out of range for axis {d} (n={self.shape[d]})")
        return np.array([self._axes[d][i] for d, i in enumerate(index)])

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Map periodic coordinates into ``[lo, lo + period)``; others unchanged."""
        x = np.array(x, dtype=np.float64)
        for d in range(self.ndim):
            if self.periodic[d]:
                period = self.hi[d] - self.lo[d]
                x[d] = self.lo[d] + np.mod(x[d] - self.lo[d], period)
        return x

    def axis_weights(self, d: int) -> np.ndarray:
        """Per-node quadrature weights along one axis (cell-counting measure).

        Interior nodes own one spacing; non-periodic edge nodes own half a
        cell, so the weights along any axis sum to ``hi - lo`` exactly.
        """
        w = np.full(self.shape[d], self.spacing[d])
        if not self.periodic[d]:
            w[0] *= 0.5
            w[-1] *= 0.5
        return w

    def compatible(self, other: "Grid", tol: float = 1e-12) -> bool:
        if self.shape != other.shape or self.periodic != other.periodic:
            return False
        scale = np.maximum(np.abs(self.hi - self.lo), 1.0)
        return bool(
            np.all(np.abs(self.lo - other.lo) <= tol * scale)
            and np.all(np.abs(self.hi - other.hi) <= tol * scale)
        )


@dataclass(frozen=True)
class ScalarField:
    """Float64 values attached to the nodes of a :class:`Grid`."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != tuple(self.grid.shape):
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        object.__setattr__(self, "values", v)


# === interpolation ==========================================================

def _axis_locate(grid: Grid, d: int, x: float, stats: EvalStats | None):
    """Return (i0, i1, frac) for multilinear interpolation along one axis.

    Periodic axes wrap; non-periodic axes clamp out-of-range queries to the
    boundary, counting a clamped query unless the overshoot is within
    ``EDGE_SNAP_CELLS`` of a cell.  Fractions within 1e-9 of a node snap to it
    so node queries reproduce stored values exactly.
    """
    n = grid.shape[d]
    dx = grid.spacing[d]
    if grid.periodic[d]:
        period = grid.hi[d] - grid.lo[d]
        u = np.mod(x - grid.lo[d], period) / dx
        base = int(np.floor(u))
        frac = u - base
        base %= n
        i1 = (base + 1) % n
    else:
        u = (x - grid.lo[d]) / dx
        if u < 0.0:
            if u < -EDGE_SNAP_CELLS and stats is not None:
                stats.clamped_queries += 1
            u = 0.0
        elif u > n - 1:
            if u > n - 1 + EDGE_SNAP_CELLS and stats is not None:
                stats.clamped_queries += 1
            u = float(n - 1)
        base = min(int(np.floor(u)), n - 2)
        frac = u - base
        i1 = base + 1
    if frac < 1e-9:
        frac = 0.0
    elif frac > 1.0 - 1e-9:
        frac = 1.0
    return base, i1, frac


def interpolate(fld: ScalarField, x, stats: EvalStats | None = None) -> float:
    """Multilinear interpolation of ``fld`` at point ``x``.

    Exact at nodes.  Periodic axes wrap; non-periodic axes clamp to the
    boundary and count the clamp in ``stats`` when given.
    """
    g = fld.grid
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (g.ndim,):
        raise ValueError(f"query point has shape {x.shape}, expected ({g.ndim},)")
    locs = [_axis_locate(g, d, x[d], stats) for d in range(g.ndim)]
    total = 0.0
    for corner in range(1 << g.ndim):
        w = 1.0
        idx = []
        for d in range(g.ndim):
            i0, i1, f = locs[d]
            if corner >> d & 1:
                w *= f
                idx.append(i1)
            else:
                w *= 1.0 - f
                idx.append(i0)
            if w == 0.0:
                break
        if w != 0.0:
            total += w * fld.values[tuple(idx)]
    return float(total)


# === one-sided differences ==================================================

def gradient_upwind(fld: ScalarField, index):
    """Left and right first-order differences at a node.

    Returns ``(left, right)`` arrays of length ``ndim``.  Periodic axes wrap
    across the seam; non-periodic boundary nodes copy the outermost interior
    difference (linear extrapolation ghost node).
    """
    g = fld.grid
    index = tuple(int(i) for i in np.atleast_1d(index))
    if len(index) != g.ndim:
        raise ValueError(f"index arity {len(index)} != grid ndim {g.ndim}")
    left = np.empty(g.ndim)
    right = np.empty(g.ndim)
    for d in range(g.ndim):
        n = g.shape[d]
        i = index[d]
        if not (0 <= i < n):
            raise ValueError(f"index {i} out of range for axis {d}")
        dx = g.spacing[d]
        here = fld.values[index]

        def at(j):
            jj = list(index)
            jj[d] = j
            return fld.values[tuple(jj)]

        if g.periodic[d]:
            left[d] = (here - at((i - 1) % n)) / dx
            right[d] = (at((i + 1) % n) - here) / dx
        else:
            if i == 0:
                left[d] = (at(1) - here) / dx
            else:
                left[d] = (here - at(i - 1)) / dx
            if i == n - 1:
                right[d] = (here - at(n - 2)) / dx
            else:
                right[d] = (at(i + 1) - here) / dx
    return left, right


def fill_upwind(values: np.ndarray, grid: Grid, d: int,
                out_minus: np.ndarray, out_plus: np.ndarray) -> None:
    """Vectorized one-sided differences along axis ``d`` for a full field.

    Writes D- into ``out_minus`` and D+ into ``out_plus`` (both shaped like
    ``values``).  Matches :func:`gradient_upwind` node-for-node.
    """
    n = values.shape[d]
    inv_dx = 1.0 / grid.spacing[d]

    def sl(i0, i1):
        s = [slice(None)] * values.ndim
        s[d] = slice(i0, i1)
        return tuple(s)

    def one(i):
        s = [slice(None)] * values.ndim
        s[d] = i
        return tuple(s)

    interior_m = sl(1, n)
    interior_lo = sl(0, n - 1)
    np.subtract(values[interior_m], values[interior_lo], out=out_minus[interior_m])
    out_minus[interior_m] *= inv_dx
    out_plus[interior_lo] = out_minus[interior_m]
    if grid.periodic[d]:
        seam = (values[one(0)] - values[one(n - 1)]) * inv_dx
        out_minus[one(0)] = seam
        out_plus[one(n - 1)] = seam
    else:
        out_minus[one(0)] = out_minus[one(1)]
        out_plus[one(n - 1)] = out_plus[one(n - 2)]


# === binary field format ====================================================

def _pack_header(grid: Grid) -> bytes:
    parts = [struct.pack("<4sII", FIELD_MAGIC, FIELD_VERSION, grid.ndim)]
    parts.append(np.asarray(grid.shape, dtype="<u4").tobytes())
    parts.append(grid.lo.astype("<f8").tobytes())
    parts.append(grid.hi.astype("<f8").tobytes())
    parts.append(np.asarray(grid.periodic, dtype="<u1").tobytes())
    return b"".join(parts)


def _read_exact(f, count: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError("truncated field file")
    return buf


def _unpack_header(f) -> Grid:
    magic, version, ndim = struct.unpack("<4sII", _read_exact(f, 12))
    if magic != FIELD_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field version {version}")
    if not (1 <= ndim <= 16):
        raise ValueError(f"implausible dimension count {ndim}")
    shape = np.frombuffer(_read_exact(f, 4 * ndim), dtype="<u4").astype(int)
    lo = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8")
    hi = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8")
    periodic = np.frombuffer(_read_exact(f, ndim), dtype="<u1").astype(bool)
    return Grid(lo=lo, hi=hi, shape=tuple(shape), periodic=tuple(periodic))


def write_field(fld: ScalarField, path_or_file) -> None:
    """Write a field in the little-endian binary format (magic ``RVCF``)."""
    if hasattr(path_or_file, "write"):
        f = path_or_file
        f.write(_pack_header(fld.grid))
        f.write(fld.values.astype("<f8").tobytes(order="C"))
    else:
        with open(path_or_file, "wb") as f:
            write_field(fld, f)


def read_field(path_or_file) -> ScalarField:
    """Read a binary field; rejects bad magic/version and non-finite values."""
    if hasattr(path_or_file, "read"):
        f = path_or_file
        grid = _unpack_header(f)
        count = grid.num_nodes
        values = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        return ScalarField(grid=grid, values=values.copy())
    with open(path_or_file, "rb") as f:
        return read_field(f)


# === CSV slice export =======================================================

def export_slice_csv(fld: ScalarField, fixed: dict, path) -> dict:
    """Write a 2-d slice of a field as CSV rows ``(x_i, x_j, value)``.

    ``fixed`` maps axis index to the coordinate held constant; values snap to
    the nearest node.  Exactly two axes must remain free.  Returns metadata
    about the slice actually taken.
    """
    g = fld.grid
    free = [d for d in range(g.ndim) if d not in fixed]
    if len(free) != 2:
        raise ValueError(f"need exactly 2 free axes, got {len(free)} (fixed: {sorted(fixed)})")
    sel = [slice(None)] * g.ndim
    snapped = {}
    for d, val in fixed.items():
        ax = g.axis(d)
        i = int(np.argmin(np.abs(ax - float(val))))
        sel[d] = i
        snapped[int(d)] = float(ax[i])
    di, dj = free
    block = fld.values[tuple(sel)]
    ai, aj = g.axis(di), g.axis(dj)
    with open(path, "w") as f:
        f.write(f"x{di},x{dj},value\n")
        for ii in range(g.shape[di]):
            for jj in range(g.shape[dj]):
                f.write(f"{ai[ii]:.17g},{aj[jj]:.17g},{block[ii, jj]:.17g}\n")
    return {"free_axes": [di, dj], "fixed": snapped}
