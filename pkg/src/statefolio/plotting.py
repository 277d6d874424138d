"""Figures written next to the CSV reports.

Rendering uses the Agg backend at a fixed size and strips software/date
metadata, so identical inputs produce byte-identical PNG files.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .panel import N_STATES, month_ordinal  # noqa: E402

_META = {"Software": None}


def _month_axis(months):
    ords = month_ordinal(np.asarray(months))
    return ords / 12.0


def plot_cumulative_returns(series: dict, path, log_scale: bool = True) -> None:
    """Wealth paths (start at 1) of named monthly return series."""
    fig, ax = plt.subplots(figsize=(8, 4.5), dpi=100)
    for name in sorted(series):
        months, rets = series[name]
        wealth = np.cumprod(1.0 + np.asarray(rets))
        ax.plot(_month_axis(months), np.maximum(wealth, 1e-12), label=name, linewidth=1.2)
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("year")
    ax.set_ylabel("wealth (start = 1)")
    ax.legend(loc="upper left", fontsize=8, frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)


def plot_transition_heatmap(values, path, title: str = "", fmt: str = "{:.3f}") -> None:
    fig, ax = plt.subplots(figsize=(6.5, 5.5), dpi=100)
    v = np.asarray(values, dtype=float)
    im = ax.imshow(np.ma.masked_invalid(v), cmap="viridis", origin="upper")
    labels = [str(s) for s in range(1, N_STATES + 1)]
    ax.set_xticks(range(N_STATES), labels)
    ax.set_yticks(range(N_STATES), labels)
    ax.set_xlabel("state at t+1")
    ax.set_ylabel("state at t")
    for i in range(N_STATES):
        for j in range(N_STATES):
            if np.isfinite(v[i, j]):
                ax.text(j, i, fmt.format(v[i, j]), ha="center", va="center", fontsize=6, color="white")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
