"""SVG figures for the report command. Output bytes depend only on the plotted data."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "causalflow"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def plot_loss_curves(histories: Mapping[str, Sequence[dict]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(histories):
        hist = histories[label]
        epochs = [h["epoch"] for h in hist if h["epoch"] > 0]
        ax.plot(epochs, [h["train_nll"] for h in hist if h["epoch"] > 0], label=f"{label} train")
        ax.plot([h["epoch"] for h in hist], [h["val_nll"] for h in hist], "--", label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean NLL per row")
    if histories:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_search_progress(logs: Mapping[str, Sequence[dict]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(logs):
        log = logs[label]
        ks = [r["k"] for r in log]
        ax.step(ks, [r["best_s"] for r in log], where="post", label=f"{label} best")
        tried = [(r["k"], r["s"]) for r in log if r.get("s") is not None]
        if tried:
            ax.scatter(*zip(*tried), s=10, alpha=0.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("composite proxy score")
    if logs:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_arm_trajectories(trajectories: Mapping[str, dict], path: str | Path) -> Path:
    """Each entry holds ``pred_y0``, ``pred_y1``, ``true_y0``, ``true_y1`` lists over time."""
    names = sorted(trajectories)
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(4 * max(len(names), 1), 3.5), squeeze=False)
    for ax, name in zip(axes[0], names):
        tr = trajectories[name]
        steps = range(len(tr["pred_y0"]))
        ax.plot(steps, tr["true_y0"], color="C0", label="true a=0")
        ax.plot(steps, tr["true_y1"], color="C1", label="true a=1")
        ax.plot(steps, tr["pred_y0"], "--", color="C0", label="pred a=0")
        ax.plot(steps, tr["pred_y1"], "--", color="C1", label="pred a=1")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("t")
    axes[0][0].set_ylabel("mean outcome")
    if names:
        axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
