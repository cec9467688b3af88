"""Report figures rendered to image files next to the numeric outputs.

Every builder returns a matplotlib Figure; `save_figure` writes it as PNG
and closes it.  The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "training_curve_figure",
    "fold_metrics_figure",
    "split_metrics_figure",
    "heatmap_montage_figure",
    "save_figure",
]

_METRIC_NAMES = ("sensitivity", "specificity", "accuracy")


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curve_figure(log_lines):
    """Loss (and accuracy, when logged) against epoch from a CSV training
    log whose first row is the header."""
    lines = [ln for ln in log_lines if ln.strip()]
    if len(lines) < 2:
        raise ValueError("training log holds no epochs")
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if rows.shape[1] != len(header):
        raise ValueError("training log rows do not match the header")

    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(rows[:, 0], rows[:, 1], color="tab:blue", label=header[1])
    ax.set_xlabel("epoch")
    ax.set_ylabel(header[1], color="tab:blue")
    if np.all(rows[:, 1] > 0):
        ax.set_yscale("log")
    if rows.shape[1] > 2:
        twin = ax.twinx()
        twin.plot(rows[:, 0], rows[:, 2], color="tab:orange", label=header[2])
        twin.set_ylabel(header[2], color="tab:orange")
        twin.set_ylim(0.0, 1.02)
    ax.set_title("training curve")
    fig.tight_layout()
    return fig


def _bar_block(ax, entries: list, title: str) -> None:
    idx = np.arange(len(entries))
    width = 0.27
    for off, name in zip((-width, 0.0, width), _METRIC_NAMES):
        vals = [np.nan if e[name] is None else e[name] for e in entries]
        ax.bar(idx + off, vals, width, label=name)
    ax.set_xticks(idx)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)


def fold_metrics_figure(report: dict):
    """Per-fold patch and patient metrics from a cross-validation report,
    with the pooled value drawn as a dashed reference line."""
    folds = report["folds"]
    if not folds:
        raise ValueError("report holds no folds")
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.4), sharey=True)
    for ax, level in zip(axes, ("patch", "patient")):
        _bar_block(ax, [f[level] for f in folds], f"{level} level")
        ax.set_xticklabels([str(f["fold"]) for f in folds])
        ax.set_xlabel("fold")
        pooled = report["pooled"][level]["accuracy"]
        if pooled is not None:
            ax.axhline(pooled, color="black", linestyle="--", linewidth=1.0,
                       label="pooled accuracy")
    axes[0].legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return fig


def split_metrics_figure(scored: dict):
    """Patch/voxel/patient metrics of a single held-out split."""
    levels = [lv for lv in ("patch", "voxel", "patient") if lv in scored]
    if not levels:
        raise ValueError("no metric levels in the report")
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    _bar_block(ax, [scored[lv] for lv in levels], "held-out metrics")
    ax.set_xticklabels(levels)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return fig


def heatmap_montage_figure(heat: np.ndarray, mask: np.ndarray | None = None):
    """Grid of per-slice probability maps; optional mask drawn as a contour."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 3:
        raise ValueError(f"expected a (Z, H, W) heatmap, got shape {heat.shape}")
    z = heat.shape[0]
    cols = int(np.ceil(np.sqrt(z)))
    rows = int(np.ceil(z / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.0 * rows))
    axes = np.atleast_1d(axes).ravel()
    for zi in range(z):
        ax = axes[zi]
        ax.imshow(heat[zi], cmap="inferno", vmin=0.0, vmax=1.0)
        if mask is not None and mask[zi].any():
            ax.contour(mask[zi].astype(float), levels=[0.5], colors="cyan", linewidths=0.7)
        ax.set_title(f"z={zi}", fontsize=7)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    return fig
