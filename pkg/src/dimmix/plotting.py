"""Figures written next to the CSV/JSON outputs. Headless (Agg)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 150


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_training_curves(rows: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in rows]
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_l.plot(epochs, [r["train_loss"] for r in rows], color="k", lw=1.5)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("train loss")
    ax_a.plot(epochs, [r["train_acc"] for r in rows], label="train", color="0.5", lw=1.5)
    ax_a.plot(epochs, [r["test_acc"] for r in rows], label="test", color="k", lw=1.5)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1.02)
    ax_a.legend(frameon=False)
    return _save(fig, path)


def plot_reach_counts(counts, num_dims: int, path) -> Path:
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(len(counts)), counts, color="k", lw=1)
    ax.axhline(num_dims, color="tab:red", ls="--", lw=1, label="all outputs")
    ax.set_xlabel("input dimension")
    ax.set_ylabel("outputs reached")
    ax.set_ylim(0, num_dims * 1.05)
    ax.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def plot_reach_matrix(matrix: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.asarray(matrix, dtype=float), cmap="Greys", interpolation="nearest", vmin=0, vmax=1)
    ax.set_xlabel("output")
    ax.set_ylabel("input")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_bench(rows: list[dict], path) -> Path:
    patches = sorted({r["patch_size"] for r in rows}, reverse=True)
    families = list(dict.fromkeys(r["family"] for r in rows))
    width = 0.8 / max(1, len(families))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for k, fam in enumerate(families):
        ms = [next((r["step_ms"] for r in rows if r["family"] == fam and r["patch_size"] == p), np.nan) for p in patches]
        ax.bar(np.arange(len(patches)) + k * width, ms, width, label=fam)
    ax.set_xticks(np.arange(len(patches)) + width * (len(families) - 1) / 2)
    labels = []
    for p in patches:
        S = next(r["seq_len"] for r in rows if r["patch_size"] == p)
        labels.append(f"patch {p}\nS={S}")
    ax.set_xticklabels(labels)
    ax.set_ylabel("ms / training step")
    ax.legend(frameon=False)
    return _save(fig, path)
