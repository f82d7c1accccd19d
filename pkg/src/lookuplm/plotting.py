"""Figures written next to sweep tables."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = (("Head", "Head"), ("RareA", "RareA (masked)"), ("RareBOTH", "RareBOTH (masked)"))


def _series_key(cfg) -> str:
    if cfg.injection == "none":
        return "base"
    key = f"E={cfg.E_n} n={cfg.n}"
    if cfg.include_current:
        key += " +cur"
    if cfg.injection == "layer0-only":
        key += " l0"
    return key


def plot_sweep(rows: Sequence, path, title: str = "Log perplexity vs. sparse parameters") -> Path:
    """One panel per test set: median log perplexity against sparse parameter count.

    Baseline rows (no table) are drawn as horizontal reference lines.
    """
    path = Path(path)
    fig, axes = plt.subplots(1, len(PANELS), figsize=(4.2 * len(PANELS), 3.4), squeeze=False)
    series = defaultdict(list)
    for r in rows:
        series[_series_key(r.config)].append(r)
    for ax, (key, label) in zip(axes[0], PANELS):
        for name, members in sorted(series.items()):
            pts = sorted((m.sparse_params, m.logpp[key]) for m in members if key in m.logpp)
            if not pts:
                continue
            if name == "base":
                for _, y in pts:
                    ax.axhline(y, color="0.4", linestyle="--", linewidth=1, label="base")
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", linewidth=1.2, label=name)
        ax.set_xscale("symlog", linthresh=1.0)
        ax.set_xlabel("sparse parameters")
        ax.set_ylabel("log perplexity / word")
        ax.set_title(label, fontsize=10)
        ax.grid(True, alpha=0.3)
    handles, labels = axes[0][0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="upper right", fontsize=8, frameon=False)
    fig.suptitle(title, fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
