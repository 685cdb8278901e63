"""Rollout overlays: true paths solid, perceived paths dotted, light
activations starred.

Each input is a trajectory export; several stack into one figure with a
shared legend.  Two-dimensional and richer states draw in the (x0, x1)
plane; scalar states draw against time.  A single-point trajectory (zero
steps) renders as its start marker alone.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import runio
from .render import color, finish, plt


def _planar(tr: runio.TrajectoryData):
    """(true xy, perceived xy) in the drawing plane."""
    if tr.states.shape[1] == 1:
        true = np.column_stack([tr.t, tr.states[:, 0]])
        seen = np.column_stack([tr.t[:-1], tr.perceived[:, 0]]) \
            if tr.n_steps else np.zeros((0, 2))
        labels = ("t", "x0")
    else:
        true = tr.states[:, :2]
        seen = tr.perceived[:, :2] if tr.n_steps else np.zeros((0, 2))
        labels = ("x0", "x1")
    return true, seen, labels


def plot_rollouts(spec: runio.PlotSpec):
    """Render the overlay; returns (figure, axes, per-input info dicts)."""
    fig, ax = plt.subplots(figsize=(6.4, 5.2))
    infos = []
    labels = ("x0", "x1")
    for k, raw in enumerate(spec.inputs):
        path = runio.resolve(raw, "trajectory.csv")
        tr = runio.read_trajectory_csv(path)
        true, seen, labels = _planar(tr)
        c = color(k)
        name = runio.label_for(raw)
        ax.plot(true[:, 0], true[:, 1], "-", color=c, lw=1.6,
                label=f"{name} (true)")
        if len(seen):
            ax.plot(seen[:, 0], seen[:, 1], ":", color=c, lw=1.2,
                    label=f"{name} (perceived)")
        ax.plot(true[0, 0], true[0, 1], marker="o", color=c, ms=6, ls="none")
        if tr.n_steps:
            ax.plot(true[-1, 0], true[-1, 1], marker="x", color=c, ms=7,
                    ls="none")
        light_steps = np.zeros(0, dtype=int)
        if tr.lights is not None:
            light_steps = np.flatnonzero(tr.lights == 1)
            if len(light_steps):
                ax.plot(true[light_steps, 0], true[light_steps, 1],
                        marker="*", ms=12, mec="k", mfc="yellow", ls="none",
                        zorder=5,
                        label=f"{name} lights ({len(light_steps)}x)")
        infos.append({"label": name, "path": path,
                      "digest": runio.provenance(path),
                      "n_steps": tr.n_steps, "min_l": float(tr.l.min()),
                      "light_steps": light_steps,
                      "light_times": tr.t[light_steps]})
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_title("closed-loop rollouts")
    ax.legend(loc="best", fontsize=8)
    return fig, ax, infos


def run(argv) -> int:
    p = argparse.ArgumentParser(
        prog="plot-rollouts",
        description="Overlay trajectory exports: true solid, perceived "
                    "dotted, light activations starred.")
    p.add_argument("--run-dir", action="append", required=True,
                   dest="run_dirs", metavar="DIR",
                   help="rollout run directory or trajectory.csv; repeatable")
    p.add_argument("--out", default="rollouts.png", help="output image path")
    p.add_argument("--format", dest="fmt",
                   help="image format, overriding the --out suffix")
    args = p.parse_args(argv)
    try:
        spec = runio.PlotSpec(inputs=tuple(args.run_dirs), out=args.out,
                              fmt=args.fmt)
        fig, _, infos = plot_rollouts(spec)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = finish(fig, spec, [f"{i['label']}: {i['digest']}" for i in infos])
    worst = min(i["min_l"] for i in infos)
    print(f"{len(infos)} rollouts, worst margin {worst:.4g} -> {out}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
