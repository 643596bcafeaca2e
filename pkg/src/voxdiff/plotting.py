"""Report figures written next to the CLI's machine-readable outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(steps, series: dict[str, list[float]], path, window: int = 50) -> Path:
    """Raw loss traces with a trailing running mean, log scale."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    steps = np.asarray(steps)
    for name, values in series.items():
        v = np.asarray(values, dtype=np.float64)
        if not np.any(v > 0):
            continue
        (line,) = ax.plot(steps, np.where(v > 0, v, np.nan), lw=0.6, alpha=0.35)
        k = max(1, min(window, len(v)))
        smooth = np.convolve(v, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], np.where(smooth > 0, smooth, np.nan), color=line.get_color(), lw=1.6, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3, which="both")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_cd_matrix(cd: np.ndarray, gen_names: list[str], ref_names: list[str], path) -> Path:
    """Heatmap of the generated-by-reference Chamfer matrix, nearest reference marked per row."""
    cd = np.asarray(cd)
    fig, ax = plt.subplots(figsize=(max(4.5, 1.8 + 0.45 * cd.shape[1]), max(3.5, 1.4 + 0.35 * cd.shape[0])))
    im = ax.imshow(cd, cmap="viridis", aspect="auto")
    best = cd.argmin(axis=1)
    ax.scatter(best, np.arange(cd.shape[0]), marker="x", color="white", s=20)
    ax.set_xticks(range(cd.shape[1]), ref_names, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(cd.shape[0]), gen_names, fontsize=7)
    ax.set_xlabel("reference")
    ax.set_ylabel("generated")
    fig.colorbar(im, ax=ax, label="Chamfer distance")
    fig.tight_layout()
    return _save(fig, path)


def plot_turntable(images: list[np.ndarray], path, title: str | None = None, cols: int = 4) -> Path:
    """Grid of ``[3, H, W]`` renders in [0, 1]."""
    rows = int(np.ceil(len(images) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.0 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, img in zip(axes.ravel(), images):
        ax.imshow(np.clip(np.transpose(np.asarray(img), (1, 2, 0)), 0, 1), interpolation="nearest")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)
