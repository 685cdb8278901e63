"""Read-only access to run directories: binary fields, CSV exports, manifests.

The readers reimplement the documented little-endian layouts (FORMATS.md in
the verifier repository) on purpose: figures must regenerate from exported
artifacts alone, with no import of the solver, so a run directory copied off
a robot is enough.  Nothing in this package writes into a run directory.
"""

from __future__ import annotations

import csv
import hashlib
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

FIELD_MAGIC = b"RVCF"
VALUE_MAGIC = b"RVVF"


@dataclass(frozen=True)
class PlotSpec:
    """What one figure consumes and where it lands.

    ``inputs`` keeps the caller's order, which fixes legend order and overlay
    stacking.  ``fixed`` pins grid axes by coordinate when a slice has to
    drop dimensions; ``marks`` flags extra cells on sweep heatmaps.
    """

    inputs: tuple
    out: str
    fixed: dict | None = None
    time: float | None = None
    fmt: str | None = None
    marks: tuple = ()

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("no inputs given")
        for p in self.inputs:
            if not os.path.exists(p):
                raise ValueError(f"no such input: {p}")

    @property
    def out_path(self) -> str:
        if self.fmt is None:
            return self.out
        root, _ = os.path.splitext(self.out)
        return root + "." + self.fmt.lstrip(".")


def resolve(path, default_name: str) -> str:
    """Accept a run directory or a direct artifact path."""
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, default_name)
    if not os.path.isfile(path):
        raise ValueError(f"no such artifact: {path}")
    return path


def label_for(raw) -> str:
    """Legend text for an input: the run directory's name, or the file stem."""
    raw = os.fspath(raw)
    if os.path.isdir(raw):
        return os.path.basename(os.path.normpath(raw))
    return os.path.splitext(os.path.basename(raw))[0]


def provenance(artifact_path: str) -> str:
    """Short provenance token for captions: the sha256 of the run's manifest
    when the artifact sits in a run directory, else of the artifact itself."""
    run_dir = os.path.dirname(os.path.abspath(artifact_path))
    manifest = os.path.join(run_dir, "manifest.json")
    target, kind = (manifest, "manifest") if os.path.isfile(manifest) \
        else (artifact_path, "file")
    with open(target, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    return f"{kind} {digest[:12]}"


# === binary fields ==========================================================

@dataclass(frozen=True)
class GridInfo:
    """Grid geometry as stored in the field headers."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple
    periodic: tuple

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        denom = np.array([n if p else n - 1
                          for n, p in zip(self.shape, self.periodic)],
                         dtype=np.float64)
        return (self.hi - self.lo) / denom

    def axis(self, d: int) -> np.ndarray:
        return self.lo[d] + self.spacing[d] * np.arange(self.shape[d])

    def same_as(self, other: "GridInfo") -> bool:
        return (self.shape == other.shape
                and self.periodic == other.periodic
                and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))


def _read_exact(f, count: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated file: wanted {count} bytes, got {len(buf)}")
    return buf


def _read_grid(f, ndim: int) -> GridInfo:
    shape = tuple(int(n) for n in
                  np.frombuffer(_read_exact(f, 4 * ndim), dtype="<u4"))
    lo = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8").copy()
    hi = np.frombuffer(_read_exact(f, 8 * ndim), dtype="<f8").copy()
    periodic = tuple(bool(b) for b in _read_exact(f, ndim))
    return GridInfo(lo=lo, hi=hi, shape=shape, periodic=periodic)


def sniff(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


def read_field(path_or_file):
    """One scalar field (.rvcf) as ``(GridInfo, values)``."""
    if not hasattr(path_or_file, "read"):
        with open(path_or_file, "rb") as f:
            return read_field(f)
    f = path_or_file
    magic, version, ndim = struct.unpack("<4sII", _read_exact(f, 12))
    if magic != FIELD_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    if version != 1:
        raise ValueError(f"unsupported field version {version}")
    grid = _read_grid(f, ndim)
    count = int(np.prod(grid.shape))
    values = np.frombuffer(_read_exact(f, 8 * count),
                           dtype="<f8").reshape(grid.shape)
    return grid, values.copy()


@dataclass(frozen=True)
class ValueStack:
    """A value container: stored slices over descending times plus the
    failure level they were solved against."""

    grid: GridInfo
    times: np.ndarray
    slices: np.ndarray
    failure: np.ndarray

    def slice_nearest(self, t: float | None):
        """(time, slice) closest to ``t``; None picks the initial time, the
        full-horizon tube."""
        if t is None:
            return float(self.times[-1]), self.slices[-1]
        k = int(np.argmin(np.abs(self.times - float(t))))
        return float(self.times[k]), self.slices[k]


def read_value_stack(path) -> ValueStack:
    """A value container (.rvvf)."""
    with open(path, "rb") as f:
        magic, version, n, ndim = struct.unpack("<4sIII", _read_exact(f, 16))
        if magic != VALUE_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {VALUE_MAGIC!r}")
        if version != 1:
            raise ValueError(f"unsupported value container version {version}")
        _read_exact(f, 8)            # solver step, not needed for figures
        _read_exact(f, 8 * ndim)     # dissipation coefficients, likewise
        times = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").copy()
        grid, failure = read_field(f)
        slices = np.empty((n,) + grid.shape)
        for k in range(n):
            g, slices[k] = read_field(f)
            if not g.same_as(grid):
                raise ValueError(f"{path}: slice {k} grid differs from the "
                                 "failure grid")
    return ValueStack(grid=grid, times=times, slices=slices, failure=failure)


# === CSV exports ============================================================

def _float_rows(rows, path):
    try:
        return np.array([[float(c) if c != "" else np.nan for c in r]
                         for r in rows], dtype=np.float64)
    except ValueError as e:
        raise ValueError(f"{path}: non-numeric cell ({e})")


def read_sweep_csv(path):
    """Gain-sweep export as ``(a_values, b_values, value_grid)``; cells whose
    solve failed stay nan."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["a", "b", "value"]:
        got = rows[0] if rows else []
        raise ValueError(f"{path}: columns {got}, expected ['a', 'b', 'value']")
    data = _float_rows(rows[1:], path)
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    a_vals = np.unique(data[:, 0])
    b_vals = np.unique(data[:, 1])
    grid = np.full((len(a_vals), len(b_vals)), np.nan)
    ia = np.searchsorted(a_vals, data[:, 0])
    ib = np.searchsorted(b_vals, data[:, 1])
    grid[ia, ib] = data[:, 2]
    return a_vals, b_vals, grid


@dataclass(frozen=True)
class TrajectoryData:
    """A trajectory export.  ``states`` has one more row than the per-step
    blocks; the final CSV row leaves those columns empty."""

    t: np.ndarray
    states: np.ndarray
    perceived: np.ndarray
    controls: np.ndarray
    errors: np.ndarray
    l: np.ndarray
    lights: np.ndarray | None

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def _block(header, prefix):
    pat = re.compile(rf"^{prefix}(\d+)$")
    return [k for k, name in enumerate(header) if pat.match(name)]


def read_trajectory_csv(path) -> TrajectoryData:
    """A rollout export; raises naming the columns when the header does not
    parse as one."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty csv")
    header = rows[0]
    xs = _block(header, "x")
    xh = _block(header, "xhat")
    us = _block(header, "u")
    es = _block(header, "e")
    n, m = len(xs), len(us)
    expected = (["t"] + [f"x{i}" for i in range(n)]
                + [f"xhat{i}" for i in range(n)]
                + [f"u{i}" for i in range(m)]
                + [f"e{i}" for i in range(n)] + ["l"])
    if n == 0 or m == 0 or header not in (expected, expected + ["lights"]):
        raise ValueError(
            f"{path}: columns {header} do not parse as a trajectory export "
            "(t, x*, xhat*, u*, e*, l[, lights])")
    lights_col = header.index("lights") if header[-1] == "lights" else None
    data = _float_rows(rows[1:], path)
    if len(data) == 0:
        raise ValueError(f"{path}: no data rows")
    lights = None
    if lights_col is not None:
        lights = data[:-1, lights_col].astype(int) if len(data) > 1 \
            else np.zeros(0, dtype=int)
    return TrajectoryData(
        t=data[:, 0],
        states=data[:, xs],
        perceived=data[:-1, xh] if len(data) > 1 else np.zeros((0, len(xs))),
        controls=data[:-1, us] if len(data) > 1 else np.zeros((0, len(us))),
        errors=data[:-1, es] if len(data) > 1 else np.zeros((0, len(es))),
        l=data[:, header.index("l")],
        lights=lights,
    )
