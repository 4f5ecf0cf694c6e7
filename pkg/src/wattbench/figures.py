"""Figure rendering for benchmark and dimming reports.

Everything draws through the Agg backend straight to files, so report
paths work headless next to their CSV outputs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .pipeline import METRIC_FIELDS, BrowserSummary  # noqa: E402

_PANEL_METRICS = [m for m in METRIC_FIELDS if m != "duration_s"]
_LABELS = {
    "discharge_mAh": "discharge (mAh)",
    "mean_current_mA": "mean current (mA)",
    "cpu_util_percent": "CPU util (%)",
    "bandwidth_MBytes": "bandwidth (MB)",
    "duration_s": "duration (s)",
}


def save_summary_figure(summaries: Sequence[BrowserSummary], path: str | Path) -> Path:
    """Per-browser mean and stddev bars, one panel per metric."""
    path = Path(path)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    names = [s.browser for s in summaries]
    xs = range(len(names))
    for ax, metric in zip(axes.flat, _PANEL_METRICS):
        means = [s.mean(metric) for s in summaries]
        errs = [s.stddev(metric) for s in summaries]
        ax.bar(xs, means, yerr=errs, capsize=4, color="#4878a8")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel(_LABELS[metric])
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle("browser benchmark summary")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_cdf_figure(xs: Sequence[float], fractions: Sequence[float],
                    path: str | Path, xlabel: str = "dim fraction") -> Path:
    """Empirical CDF as a post-step line."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    if xs:
        ax.step(list(xs), list(fractions), where="post", color="#306030")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction of windows")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_savings_figure(tables: dict[str, list[dict]], path: str | Path) -> Path:
    """Aggressive vs conservative savings bars, one panel per device model."""
    path = Path(path)
    n = max(len(tables), 1)
    fig, axes = plt.subplots(1, n, figsize=(5.5 * n, 4), squeeze=False)
    for ax, (name, rows) in zip(axes.flat, sorted(tables.items())):
        bs = [r["brightness"] for r in rows]
        width = 0.35
        xs = range(len(bs))
        ax.bar([x - width / 2 for x in xs], [r["aggressive_savings_pct"] for r in rows],
               width, label="aggressive", color="#a84848")
        ax.bar([x + width / 2 for x in xs], [r["conservative_savings_pct"] for r in rows],
               width, label="conservative", color="#4878a8")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(b) for b in bs])
        ax.set_xlabel("brightness")
        ax.set_ylabel("savings (%)")
        ax.set_title(name)
        ax.legend()
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
