"""Bar charts written next to the tabular reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}

# keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def grouped_bars(ax, groups: Sequence[str], series: Mapping[str, Sequence[float]], ylabel: str):
    x = np.arange(len(groups))
    n = max(1, len(series))
    width = 0.8 / n
    for i, (name, values) in enumerate(series.items()):
        bars = ax.bar(x + (i - (n - 1) / 2) * width, values, width, label=name)
        ax.bar_label(bars, fmt="%.1f", fontsize=7, padding=1)
    ax.set_xticks(x, groups)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)


def plot_psr(models: Mapping[str, Mapping[str, float]], path: str | Path, title: str = "") -> Path:
    """Clean vs protected PSR for each held-out model."""
    names = sorted(models)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 1.2 * len(names) + 1.5), 3.0))
        grouped_bars(
            ax,
            names,
            {
                "clean": [models[m]["psr_clean"] for m in names],
                "protected": [models[m]["psr_protected"] for m in names],
            },
            "PSR (%)",
        )
        ax.set_ylim(0, 105)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)


def plot_confidence(means: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    """Mean API confidence per provider, one bar per image set (clean, protected, ...)."""
    providers = sorted(means)
    sets = sorted({k for v in means.values() for k in v})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 1.4 * len(providers) + 1.5), 3.0))
        grouped_bars(ax, providers, {s: [means[p].get(s, np.nan) for p in providers] for s in sets},
                     "confidence")
        ax.set_ylim(0, 105)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)


def plot_trace(trace: Sequence[Sequence[float]], path: str | Path) -> Path:
    """Loss curves of one protect run (step, L_adv, L_sem, L_total)."""
    arr = np.asarray(trace, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        if arr.size:
            for col, name in ((1, "L_adv"), (2, "L_sem"), (3, "L_total")):
                ax.plot(arr[:, 0], arr[:, col], label=name, lw=1.2)
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)
