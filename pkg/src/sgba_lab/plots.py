"""Plot emission for reports: all figures regenerate from on-disk data."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_mask_heatmap(mask: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(2.4, 2.4), dpi=120)
    im = ax.imshow(mask, cmap="inferno", vmin=0.0, vmax=1.0)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout(pad=0.3)
    fig.savefig(path)
    plt.close(fig)


def save_image_grid(images: np.ndarray, path: str | Path, cols: int = 8,
                    titles: list[str] | None = None) -> None:
    """PNG grid of (N, H, W, C) images in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(images)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.45 * rows), dpi=110)
    axes = np.atleast_2d(axes)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.axis("off")
        if i < n:
            img = images[i]
            if img.shape[-1] == 1:
                ax.imshow(img[..., 0], cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.imshow(np.clip(img, 0.0, 1.0))
            if titles is not None:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout(pad=0.2)
    fig.savefig(path)
    plt.close(fig)


def save_variance_panels(benign_samples: np.ndarray, malicious_samples: np.ndarray,
                         layer_names: list[str], malicious_name: str,
                         path: str | Path) -> None:
    """Per-layer strip plots of weight variances, benign vs malicious."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_layers = len(layer_names)
    fig, axes = plt.subplots(1, n_layers, figsize=(2.6 * n_layers, 2.8), dpi=110)
    if n_layers == 1:
        axes = [axes]
    rng = np.random.default_rng(0)
    for i, (ax, name) in enumerate(zip(axes, layer_names)):
        for samples, color, label, x0 in (
                (benign_samples[:, i], "tab:blue", "benign", 0.0),
                (malicious_samples[:, i], "tab:red", malicious_name, 1.0)):
            jitter = rng.uniform(-0.12, 0.12, size=len(samples))
            ax.scatter(x0 + jitter, samples, s=12, alpha=0.7, color=color, label=label)
            ax.hlines(np.median(samples), x0 - 0.2, x0 + 0.2, color=color, lw=2)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["benign", malicious_name], fontsize=7)
        if i == 0:
            ax.set_ylabel("weight variance")
    fig.tight_layout(pad=0.4)
    fig.savefig(path)
    plt.close(fig)


def save_score_scatter(scores: dict[str, float], provenance: dict[str, str],
                       threshold: float, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[float]] = {}
    for mid, score in scores.items():
        groups.setdefault(provenance[mid], []).append(score)
    fig, ax = plt.subplots(figsize=(4.2, 3.0), dpi=110)
    rng = np.random.default_rng(0)
    for x, (prov, vals) in enumerate(sorted(groups.items())):
        jitter = rng.uniform(-0.15, 0.15, size=len(vals))
        ax.scatter(np.full(len(vals), x) + jitter, vals, s=14, alpha=0.75, label=prov)
    ax.axhline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(sorted(groups))
    ax.set_ylabel("detector score")
    ax.legend(fontsize=7)
    fig.tight_layout(pad=0.4)
    fig.savefig(path)
    plt.close(fig)
