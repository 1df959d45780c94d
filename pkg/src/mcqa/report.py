"""Metric-log reading and matplotlib figures written next to the text output."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (6.0, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "savefig.dpi": 120,
})


def read_metric_log(path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def plot_training_curves(records: list[dict], out_path, title: str = "") -> Path:
    """Train loss and validation accuracy against epoch on twin axes."""
    out_path = Path(out_path)
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots()
    ax.plot(epochs, [r["train_loss"] for r in records], color="tab:blue", marker=".", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    acc = [(r["epoch"], r["val_accuracy"]) for r in records if r.get("val_accuracy") is not None]
    if acc:
        ax2 = ax.twinx()
        ax2.plot([e for e, _ in acc], [a for _, a in acc], color="tab:orange", marker=".", label="val accuracy")
        ax2.set_ylabel("validation accuracy", color="tab:orange")
        ax2.set_ylim(0.0, 1.0)
        ax2.grid(False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_variant_accuracies(results: dict[str, list[float]], out_path, title: str = "") -> Path:
    """One group of points per model variant (one point per seed) with the median marked."""
    out_path = Path(out_path)
    fig, ax = plt.subplots()
    names = list(results)
    for k, name in enumerate(names):
        vals = sorted(results[name])
        ax.scatter([k] * len(vals), vals, color="tab:blue", alpha=0.6, zorder=3)
        if vals:
            mid = vals[len(vals) // 2] if len(vals) % 2 else 0.5 * (vals[len(vals) // 2 - 1] + vals[len(vals) // 2])
            ax.hlines(mid, k - 0.25, k + 0.25, color="tab:red", zorder=4)
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("held-out accuracy")
    ax.set_ylim(0.0, 1.02)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_attention(weights, out_path, title: str = "") -> Path:
    """Heat map of one attention-weight matrix."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    im = ax.imshow(weights, cmap="viridis", vmin=0.0, aspect="auto")
    ax.grid(False)
    ax.set_xlabel("key step")
    ax.set_ylabel("query step")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
