"""Figure rendering for cross-validation reports.

Everything draws through the Agg backend and writes PNG files next to
the CSV/JSON reports; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport


def metric_bars(reports: dict[str, MetricReport], metric: str, path: Path) -> Path:
    """Grouped bars: one cluster per AU (plus Average), one bar per method."""
    first = next(iter(reports.values()))
    groups = [f"AU{n}" for n in first.au_names] + ["Avg"]
    n_groups = len(groups)
    labels = list(reports)
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * n_groups), 3.6))
    for i, label in enumerate(labels):
        rep = reports[label]
        vals = list(rep.per_au[metric]) + [rep.average[metric]]
        xs = [g + (i - (len(labels) - 1) / 2) * width for g in range(n_groups)]
        ax.bar(xs, vals, width=width, label=label)
    ax.set_xticks(range(n_groups))
    ax.set_xticklabels(groups, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(fold_results, path: Path) -> Path | None:
    """Mean training loss per epoch for every trained checkpoint."""
    series: dict[str, list[list[float]]] = {}
    for fr in fold_results:
        for key, log in fr.logs.items():
            series.setdefault(key, []).append([log.initial_loss] + log.epoch_losses)
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for key, runs in series.items():
        for j, run in enumerate(runs):
            ax.plot(range(len(run)), run, marker="o", markersize=3,
                    label=key if j == 0 else None, alpha=0.7)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def crossval_figures(reports: dict[str, MetricReport],
                     fold_results, out_dir: Path) -> list[Path]:
    first = next(iter(reports.values()))
    metrics = first.per_au.keys()
    paths = []
    for metric in metrics:
        paths.append(metric_bars(reports, metric, out_dir / f"fig_{metric}.png"))
    curve = training_curves(fold_results, out_dir / "fig_training.png")
    if curve is not None:
        paths.append(curve)
    return paths


def ablation_figure(reports: dict[str, MetricReport], out_dir: Path) -> Path | None:
    """Average of every metric as a function of the merge point."""
    if len(reports) < 2:
        return None
    labels = list(reports)
    first = next(iter(reports.values()))
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for metric in first.average:
        ax.plot(range(len(labels)), [reports[m].average[metric] for m in labels],
                marker="o", label=metric)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("average over AUs")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "fig_ablation.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
