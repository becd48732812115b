"""Figure rendering for run artifacts.

Every report path that writes delimited output can also render a figure
next to it: training curves from a metrics CSV, per-strategy convergence
comparisons from an ablation directory, and attention heatmaps from dump
files. CSVs stay the canonical record; figures are a convenience view.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import FormatError


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_training_figure(metrics_csv, out_path) -> Path:
    """Loss and validation-mAP curves for one run."""
    rows = _read_csv(metrics_csv)
    if not rows:
        raise FormatError(f"{metrics_csv} has no rows")
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax_loss, ax_map) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key, label in (("loss_total", "total"), ("loss_l", "learnable"),
                       ("loss_h", "hard")):
        ax_loss.plot(epochs, [float(r[key]) for r in rows], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_map.plot(epochs, [float(r["val_map"]) for r in rows], color="tab:green")
    ax_map.set_xlabel("epoch")
    ax_map.set_ylabel("val mAP")
    ax_map.set_ylim(0.0, 1.0)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_ablation_figure(ablation_dir, out_path) -> Path:
    """Median validation-mAP convergence per strategy.

    Reads the per-run metrics.csv files written under
    ``<ablation_dir>/<strategy>_seed<k>/`` by the ablation runner.
    """
    ablation_dir = Path(ablation_dir)
    runs: dict[str, list[list[float]]] = {}
    for metrics in sorted(ablation_dir.glob("*_seed*/metrics.csv")):
        strategy = metrics.parent.name.rsplit("_seed", 1)[0]
        rows = _read_csv(metrics)
        runs.setdefault(strategy, []).append([float(r["val_map"]) for r in rows])
    if not runs:
        raise FormatError(f"no per-run metrics found under {ablation_dir}")
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for strategy, curves in sorted(runs.items()):
        depth = min(len(c) for c in curves)
        stacked = np.array([c[:depth] for c in curves])
        median = np.median(stacked, axis=0)
        ax.plot(np.arange(1, depth + 1), median, label=strategy)
    ax.set_xlabel("epoch")
    ax.set_ylabel("median val mAP")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_attention_figure(attention_csvs, out_path, grid_h: int, grid_w: int) -> Path:
    """Per-(layer, head) mean attention heatmaps from dump files."""
    attention_csvs = [Path(p) for p in attention_csvs]
    if not attention_csvs:
        raise FormatError("no attention dumps to render")
    cols = len(attention_csvs)
    fig, axes = plt.subplots(1, cols, figsize=(2.6 * cols, 2.8), squeeze=False)
    for ax, path in zip(axes[0], attention_csvs):
        with open(path, newline="") as fh:
            rows = np.array([[float(v) for v in row] for row in csv.reader(fh)])
        heat = rows.mean(axis=0).reshape(grid_h, grid_w)
        ax.imshow(heat, cmap="viridis")
        ax.set_title(path.stem.replace("attention_", ""), fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
