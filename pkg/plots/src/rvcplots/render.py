"""Shared figure furniture: headless backend, provenance caption, save."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

# palette with enough contrast for half a dozen overlaid runs
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
          "#17becf", "#8c564b", "#7f7f7f")

_META_KEY = {".png": "Description", ".svg": "Description", ".pdf": "Subject"}


def color(k: int) -> str:
    return COLORS[k % len(COLORS)]


def finish(fig, spec, provenance_lines) -> str:
    """Caption the figure with its input provenance and write it out.

    The caption (and the image metadata, where the format supports it)
    carries each input's manifest hash, so a figure can always be traced
    back to the exact run that produced it.
    """
    text = " | ".join(provenance_lines)
    fig.text(0.01, 0.005, text, fontsize=5, family="monospace", color="0.4")
    out = spec.out_path
    key = _META_KEY.get(os.path.splitext(out)[1].lower())
    fig.savefig(out, dpi=150, metadata={key: text} if key else None)
    plt.close(fig)
    return out
