"""Figure rendering for the report paths.

Every figure lands next to the delimited file it visualizes: the training
loss curve, the cross-validation summary, and the sweep grid. Headless
backend; nothing here ever opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGSIZE = (7.0, 4.2)
DPI = 120


def save_loss_curve(steps, losses, lrs, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(steps, losses, color="tab:blue", lw=1.2, label="training loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=1.0, alpha=0.7, label="learning rate")
    ax2.set_ylabel("learning rate")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return Path(out_path)


def save_eval_figure(report, out_path: str | Path) -> Path:
    """Box plot of per-fold SRCC/PLCC grouped by subset (pooled splits)."""
    groups: dict[str, tuple[list, list]] = {}
    for r in report.rows:
        if r.split_mode != "pooled":
            continue
        groups.setdefault(r.subset, ([], []))
        groups[r.subset][0].append(r.srcc)
        groups[r.subset][1].append(r.plcc)
    names = sorted(groups, key=lambda n: (n != "overall", n))
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.2), sharey=True)
    for ax, idx, title in ((axes[0], 0, "SRCC"), (axes[1], 1, "PLCC")):
        ax.boxplot([groups[n][idx] for n in names], tick_labels=names)
        ax.set_title(title)
        ax.grid(alpha=0.3, axis="y")
        ax.tick_params(axis="x", rotation=20)
    fig.suptitle("held-out correlation across repeats and folds")
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return Path(out_path)


def save_sweep_heatmap(mem_values, seg_values, grid, out_path: str | Path) -> Path:
    """Final-loss heatmap: rows are segment lengths, columns memory tokens."""
    arr = np.asarray(grid, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(arr, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(mem_values)), [str(m) for m in mem_values])
    ax.set_yticks(range(len(seg_values)), [str(s) for s in seg_values])
    ax.set_xlabel("memory tokens")
    ax.set_ylabel("segment length")
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            ax.text(j, i, f"{arr[i, j]:.3f}", ha="center", va="center",
                    color="white", fontsize=9)
    fig.colorbar(im, ax=ax, label="final training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return Path(out_path)
