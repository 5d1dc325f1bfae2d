"""Figures for the evaluation report and training curves (files only, no display)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _by_variant(rows, key):
    series = {}
    for r in rows:
        series.setdefault(r["variant"], []).append((r["noise"], r[key]))
    return {v: sorted(pts) for v, pts in series.items()}


def plot_retention(retention: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for variant, pts in _by_variant(retention, "retention").items():
        xs, ys = zip(*pts)
        ax.plot([100 * x for x in xs], ys, marker="o", label=variant)
    ax.set_xlabel("noise intensity (%)")
    ax.set_ylabel("M_terrain retention")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_metrics(rows: list[dict], path) -> Path:
    metrics = ("E_vel", "E_ang", "M_terrain", "M_reward")
    fig, axes = plt.subplots(1, len(metrics), figsize=(14, 3.2))
    for ax, m in zip(axes, metrics):
        for variant, pts in _by_variant(rows, m).items():
            xs, ys = zip(*pts)
            ax.plot([100 * x for x in xs], ys, marker="o", label=variant)
        ax.set_title(m)
        ax.set_xlabel("noise (%)")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_curve(metrics_csv, path, x: str, ys) -> Path:
    """Line plot of selected columns from a training metrics.csv."""
    with open(metrics_csv) as fh:
        rows = list(csv.DictReader(fh))
    fig, axes = plt.subplots(1, len(ys), figsize=(4 * len(ys), 3))
    axes = [axes] if len(ys) == 1 else axes
    xs = [float(r[x]) for r in rows]
    for ax, y in zip(axes, ys):
        ax.plot(xs, [float(r[y]) for r in rows])
        ax.set_title(y)
        ax.set_xlabel(x)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
