"""SVG figure emission for training runs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ValidationError  # noqa: E402

Array = np.ndarray


def load_metrics_rows(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed metrics line: {exc}") from exc
    if not rows:
        raise ValidationError(f"no metrics rows in {path}")
    return rows


def plot_loss_curves(rows: list[dict], out_path) -> None:
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, color in (("total", "#333333"), ("ce", "#4C78A8"),
                       ("inter", "#F58518"), ("intra", "#54A24B")):
        ax.plot(epochs, [r[key] for r in rows], label=key, color=color)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_accuracy_curves(rows: list[dict], out_path) -> None:
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r["train_accuracy"] for r in rows],
            label="train", color="#4C78A8")
    ax.plot(epochs, [r["eval_accuracy"] for r in rows],
            label="eval", color="#F58518")
    if any(r.get("family_recovery") is not None for r in rows):
        ax.plot(epochs,
                [r["family_recovery"] if r["family_recovery"] is not None else 0.0
                 for r in rows],
                label="family recovery", color="#54A24B", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy / score")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def pca_2d(x: Array) -> Array:
    """Project rows onto the top two principal axes, sign-fixed for determinism."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, len(x) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    for k in range(components.shape[1]):
        pivot = np.argmax(np.abs(components[:, k]))
        if components[pivot, k] < 0:
            components[:, k] = -components[:, k]
    return centered @ components


def plot_embedding_scatter(embeddings: Array, labels, out_path) -> None:
    points = pca_2d(embeddings)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap("tab20")
    for class_index in np.unique(labels):
        mask = labels == class_index
        ax.scatter(points[mask, 0], points[mask, 1], s=14,
                   color=cmap(int(class_index) % 20),
                   label=f"class {int(class_index)}")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_family_heatmap(w: Array, out_path) -> None:
    w = np.asarray(w, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(w, cmap="viridis", vmin=0.0, vmax=1.5)
    fig.colorbar(image, ax=ax, label="affinity similarity")
    ax.set_xlabel("class j")
    ax.set_ylabel("class i")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
