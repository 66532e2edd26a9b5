"""Matplotlib figures rendered next to the delimited run outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(log, path) -> None:
    """Slate loss, probe full loss, and held-out precision over epochs."""
    epochs = [r.epoch for r in log.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [r.mean_slate_loss for r in log.records], label="mean slate loss")
    ax1.plot(epochs, [r.probe_full_loss for r in log.records], label="probe full loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()

    pts = [(r.epoch, r.p_at_1, r.p_at_5) for r in log.records if r.p_at_1 is not None]
    if pts:
        xs, p1, p5 = zip(*pts)
        ax2.plot(xs, p1, marker="o", label="P@1")
        ax2.plot(xs, p5, marker="s", label="P@5")
        ax2.set_ylim(0, 1)
        ax2.legend()
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("precision")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_curves(arm_logs: dict, path) -> None:
    """Cumulative wall time vs held-out P@1, one curve per strategy arm."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for arm, log in arm_logs.items():
        wall = np.cumsum([r.wall_seconds for r in log.records])
        pts = [(wall[i], r.p_at_1) for i, r in enumerate(log.records) if r.p_at_1 is not None]
        if not pts:
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", markersize=3, label=arm)
    ax.set_xlabel("training wall time (s)")
    ax.set_ylabel("P@1")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
