"""Gain-sweep heatmap: value at the probe state over the (a, b) gain grid.

Cells above zero are the verified-safe controllers.  The zero level is
contoured when the sweep actually crosses it, the best cell gets a star,
and ``--mark a,b`` flags extra gain pairs (the shipped controller, say).
Failed solve cells arrive as nan and render blank.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import runio
from .render import finish, plt


def plot_sweep(spec: runio.PlotSpec):
    """Render the heatmap; returns (figure, axes, info dict)."""
    path = runio.resolve(spec.inputs[0], "sweep.csv")
    a_vals, b_vals, grid = runio.read_sweep_csv(path)

    fig, ax = plt.subplots(figsize=(6.4, 5.2))
    masked = np.ma.masked_invalid(grid.T)
    mesh = ax.pcolormesh(a_vals, b_vals, masked, shading="nearest",
                         cmap="RdBu", rasterized=True)
    span = float(np.nanmax(np.abs(grid))) if np.isfinite(grid).any() else 1.0
    mesh.set_clim(-span if span else -1.0, span if span else 1.0)
    fig.colorbar(mesh, ax=ax, label="value at the probe state")

    contour = None
    finite = grid[np.isfinite(grid)]
    crosses = finite.size and finite.min() < 0.0 < finite.max()
    if crosses and len(a_vals) > 1 and len(b_vals) > 1:
        contour = ax.contour(a_vals, b_vals, grid.T, levels=[0.0],
                             colors="k", linewidths=1.2)

    best = None
    if finite.size:
        i, j = np.unravel_index(np.nanargmax(grid), grid.shape)
        best = (float(a_vals[i]), float(b_vals[j]), float(grid[i, j]))
        ax.plot(best[0], best[1], marker="*", ms=14, mec="k", mfc="gold",
                ls="none", label=f"best {best[2]:.3g}")
    for a, b in spec.marks:
        ax.plot(a, b, marker="s", ms=9, mec="k", mfc="none", ls="none",
                label=f"({a:g}, {b:g})")
    if best or spec.marks:
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("a (crosstrack gain)")
    ax.set_ylabel("b (heading gain)")
    ax.set_title("gain sweep")
    info = {"label": runio.label_for(spec.inputs[0]), "path": path,
            "digest": runio.provenance(path), "a": a_vals, "b": b_vals,
            "grid": grid, "contour": contour, "best": best}
    return fig, ax, info


def _parse_mark(text) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"bad --mark entry {text!r}, want a,b")
    return float(parts[0]), float(parts[1])


def run(argv) -> int:
    p = argparse.ArgumentParser(
        prog="plot-sweep",
        description="Heatmap of a gain sweep with the zero level and the "
                    "best cell marked.")
    p.add_argument("--run-dir", required=True, metavar="DIR",
                   help="sweep run directory or sweep.csv path")
    p.add_argument("--mark", action="append", default=[], metavar="A,B",
                   help="flag a gain pair; repeatable")
    p.add_argument("--out", default="sweep.png", help="output image path")
    p.add_argument("--format", dest="fmt",
                   help="image format, overriding the --out suffix")
    args = p.parse_args(argv)
    try:
        spec = runio.PlotSpec(inputs=(args.run_dir,), out=args.out,
                              fmt=args.fmt,
                              marks=tuple(_parse_mark(m) for m in args.mark))
        fig, _, info = plot_sweep(spec)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = finish(fig, spec, [f"{info['label']}: {info['digest']}"])
    cells = info["grid"].size
    print(f"{cells} cells"
          + (f", best at a={info['best'][0]:g}, b={info['best'][1]:g}"
             if info["best"] else "")
          + f" -> {out}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
