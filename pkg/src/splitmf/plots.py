"""Figure rendering for the CLI report paths.

Every plot lands next to the CSV/JSON it illustrates; the delimited files
remain the machine-readable contract, figures are for eyeballs.  The Agg
backend is forced so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_loss_curves",
    "plot_grouped_bars",
    "plot_scaling_lines",
    "plot_recovery_errors",
]


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_loss_curves(series: dict[str, list[float]], path, title="training loss", logy=True):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in series.items():
        ax.plot(range(len(values)), values, label=label, linewidth=1.2)
    ax.set_xlabel("round")
    ax.set_ylabel("loss")
    if logy and all(v > 0 for vals in series.values() for v in vals):
        ax.set_yscale("log")
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def plot_grouped_bars(labels, groups: dict[str, list[float]], path, ylabel, title):
    """One bar per (label, group), groups side by side."""
    x = np.arange(len(labels))
    width = 0.8 / max(len(groups), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, (name, values) in enumerate(groups.items()):
        ax.bar(x + (k - (len(groups) - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def plot_scaling_lines(x, lines: dict[str, list[float]], path, xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in lines.items():
        ax.plot(x, values, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def plot_recovery_errors(errors_by_mode: dict[str, dict[int, float]], path):
    """Per-item absolute recovery error, one marker series per mode (log scale)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, errors in errors_by_mode.items():
        items = sorted(errors)
        vals = [max(errors[j], 1e-12) for j in items]
        ax.semilogy(items, vals, marker="o", linestyle="none", label=mode)
    ax.set_xlabel("item")
    ax.set_ylabel("absolute recovery error")
    ax.set_title("rating recovery from captured gradients")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)
