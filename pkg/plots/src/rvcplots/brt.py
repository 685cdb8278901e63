"""Tube-boundary ladder: the zero contour of each input's value slice.

Inputs are value containers (or bare scalar fields), all on one grid.
Containers slice at the requested time, defaulting to the initial time, the
full-horizon tube.  Grids with more than two axes are cut down by pinning
axes (``--fix``, defaulting to the middle node); a 1-d grid renders the
whole (state, time) plane instead, showing the boundary sweep across the
horizon.  A slice that never changes sign draws no contour.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import runio
from .render import color, finish, plt


def parse_fix(text) -> dict:
    """'axis=value' pairs, comma-separated, into {axis: value}."""
    fixed = {}
    if text:
        for part in text.split(","):
            axis, _, val = part.partition("=")
            try:
                fixed[int(axis)] = float(val)
            except ValueError:
                raise ValueError(f"bad --fix entry {part!r}, want axis=value")
    return fixed


def _plane(grid, values, fixed):
    """Cut an n-d slice to 2-d: honor ``fixed``, then pin trailing axes at
    their middle node.  Returns (free axis indices, 2-d array)."""
    fixed = dict(fixed or {})
    for d in fixed:
        if not 0 <= d < grid.ndim:
            raise ValueError(f"--fix axis {d} out of range for a "
                             f"{grid.ndim}-d grid")
    free = [d for d in range(grid.ndim) if d not in fixed]
    while len(free) > 2:
        d = free.pop()
        fixed[d] = float(grid.axis(d)[grid.shape[d] // 2])
    if len(free) < 2:
        raise ValueError(f"over-pinned: {len(free)} axes left free, need 2")
    sel = [slice(None)] * grid.ndim
    for d, val in fixed.items():
        sel[d] = int(np.argmin(np.abs(grid.axis(d) - val)))
    return free, values[tuple(sel)]


def plot_brt_slices(spec: runio.PlotSpec):
    """Render the ladder; returns (figure, axes, per-input info dicts).

    Raises when an input's grid differs from the first one's, naming the
    offending file.
    """
    entries = []
    for raw in spec.inputs:
        path = runio.resolve(raw, "value.rvvf")
        stack = nd = None
        if runio.sniff(path) == runio.VALUE_MAGIC:
            stack = runio.read_value_stack(path)
            grid = stack.grid
        else:
            grid, nd = runio.read_field(path)
            if grid.ndim == 1:
                raise ValueError(f"{path}: a 1-d static field has no plane "
                                 "to draw")
        entries.append({"label": runio.label_for(raw), "path": path,
                        "grid": grid, "stack": stack, "nd": nd,
                        "digest": runio.provenance(path), "time": None})

    first = entries[0]
    for e in entries[1:]:
        if not e["grid"].same_as(first["grid"]):
            raise ValueError(f"{e['path']}: grid differs from "
                             f"{first['path']}")
    one_d = first["grid"].ndim == 1
    if one_d and any(e["stack"] is None for e in entries):
        raise ValueError("1-d inputs must be value containers")

    fig, ax = plt.subplots(figsize=(6.4, 5.2))
    for k, e in enumerate(entries):
        grid = e["grid"]
        if one_d:
            free = [0]
            xi, yi = grid.axis(0), e["stack"].times
            plane = e["stack"].slices.T     # (x, t)
        else:
            if e["stack"] is not None:
                e["time"], nd = e["stack"].slice_nearest(spec.time)
            else:
                nd = e["nd"]
            free, plane = _plane(grid, nd, spec.fixed)
            xi, yi = grid.axis(free[0]), grid.axis(free[1])
        e["plane"] = plane
        e["axes"] = (xi, yi)
        e["free"] = free
        if plane.min() < 0.0 < plane.max():
            e["contour"] = ax.contour(xi, yi, plane.T, levels=[0.0],
                                      colors=[color(k)], linewidths=1.4)
        else:
            e["contour"] = None
        ax.plot([], [], color=color(k), lw=1.4,
                label=e["label"] + ("" if e["contour"] is not None
                                    else " (no boundary)"))

    if one_d:
        ax.set_xlabel("x0")
        ax.set_ylabel("t")
        ax.set_title("tube boundary across the horizon")
    else:
        ax.set_xlabel(f"x{first['free'][0]}")
        ax.set_ylabel(f"x{first['free'][1]}")
        times = sorted({e["time"] for e in entries if e["time"] is not None})
        title = "verified-unsafe boundary"
        if times:
            title += " at t = " + ", ".join(f"{t:g}" for t in times)
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    return fig, ax, entries


def run(argv) -> int:
    p = argparse.ArgumentParser(
        prog="plot-brt-slices",
        description="Overlay the zero contours of stored value fields, "
                    "one per input, on a shared slice.")
    p.add_argument("--run-dir", action="append", required=True,
                   dest="run_dirs", metavar="DIR",
                   help="run directory or field file; repeat for a ladder")
    p.add_argument("--time", type=float,
                   help="slice time (default: the initial time)")
    p.add_argument("--fix", help="axis=value pairs, comma-separated")
    p.add_argument("--out", default="brt.png", help="output image path")
    p.add_argument("--format", dest="fmt",
                   help="image format, overriding the --out suffix")
    args = p.parse_args(argv)
    try:
        spec = runio.PlotSpec(inputs=tuple(args.run_dirs), out=args.out,
                              fixed=parse_fix(args.fix), time=args.time,
                              fmt=args.fmt)
        fig, _, entries = plot_brt_slices(spec)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = finish(fig, spec, [f"{e['label']}: {e['digest']}" for e in entries])
    drawn = sum(e["contour"] is not None for e in entries)
    print(f"{drawn}/{len(entries)} tube boundaries -> {out}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
