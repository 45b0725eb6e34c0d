"""Figures for benchmark reports (written to files, never shown)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BASELINE, PARALLEL, BenchmarkRow  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
}


def figure_size(width: float = 6.0):
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, width * golden


def plot_benchmark(rows: Sequence[BenchmarkRow], path: str | Path, title: str | None = None) -> Path:
    """Mean latency of both modes against phrase count, speedup on a twin axis."""
    groups = sorted({r.phrase_count for r in rows})
    by = {(r.phrase_count, r.mode): r for r in rows}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        for mode, marker, label in ((BASELINE, "o", "sentence-level AR"), (PARALLEL, "s", "phrase-parallel")):
            ys = [by[g, mode].mean_ms / 1e3 for g in groups]
            es = [by[g, mode].std_ms / 1e3 for g in groups]
            ax.errorbar(groups, ys, yerr=es, marker=marker, capsize=3, label=label)
        ax.set_xlabel("phrases per sentence")
        ax.set_ylabel("time per sentence (s)")
        ax.set_xticks(groups)
        ax2 = ax.twinx()
        ax2.plot(groups, [by[g, PARALLEL].speedup for g in groups], "k--", marker="^", label="speedup")
        ax2.set_ylabel("speedup (x)")
        ax2.set_ylim(bottom=0)
        handles = ax.get_legend_handles_labels()
        h2 = ax2.get_legend_handles_labels()
        ax.legend(handles[0] + h2[0], handles[1] + h2[1], loc="upper left", frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
