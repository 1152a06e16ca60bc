"""Image grids and diagnostic figures written to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .trainer import smoothed  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def to_uint8(images) -> np.ndarray:
    """Linear map of [-1, 1] onto 0..255, values outside clipped."""
    x = np.clip((np.asarray(images, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8)


def image_grid(images, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile an (N, H, W) stack into one uint8 image with ``pad`` black pixels between tiles."""
    imgs = to_uint8(images)
    if imgs.ndim != 3 or len(imgs) == 0:
        raise ValueError("expected a non-empty (N, H, W) stack")
    n, h, w = imgs.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad), dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, c = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = im
    return grid


def save_grid(images, path, ncols: int | None = None, upscale: int = 2) -> Path:
    grid = image_grid(images, ncols)
    if upscale > 1:
        grid = np.kron(grid, np.ones((upscale, upscale), dtype=np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(path, format="PNG")
    return path


def _save_fig(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_losses(metrics, path, window: int = 100) -> Path:
    """Smoothed training loss per level from (step, level, loss) rows."""
    rows = np.asarray(metrics, dtype=np.float64).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for l in np.unique(rows[:, 1]).astype(int):
        loss = rows[rows[:, 1] == l, 2]
        sm = smoothed(loss, window)
        ax.plot(np.arange(len(sm)) + (len(loss) - len(sm)), sm, label=f"level {l}", lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (moving mean, {window})")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save_fig(fig, path)


def plot_resample_rows(sources, rows: dict, path) -> Path:
    """One row per source: the source, then its resample at each depth k."""
    ks = sorted(rows)
    src = np.asarray(sources)
    fig, axes = plt.subplots(len(src), len(ks) + 1, figsize=(1.1 * (len(ks) + 1), 1.1 * len(src)), squeeze=False)
    for i in range(len(src)):
        panels = [src[i]] + [rows[k][i] for k in ks]
        for j, im in enumerate(panels):
            ax = axes[i, j]
            ax.imshow(to_uint8(im), cmap="gray", vmin=0, vmax=255, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title("source" if j == 0 else f"k={ks[j - 1]}", fontsize=8)
    fig.tight_layout(pad=0.2)
    return _save_fig(fig, path)


def plot_resample_distance(distances: dict, path) -> Path:
    ks = sorted(distances)
    fig, ax = plt.subplots(figsize=(3.6, 2.8))
    ax.plot(ks, [distances[k] for k in ks], "o-", color="k", lw=1)
    ax.set_xticks(ks)
    ax.set_xlabel("resampled levels k")
    ax.set_ylabel("feature distance to source")
    fig.tight_layout()
    return _save_fig(fig, path)


def plot_oracle_errors(t_values, rel_errors, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 2.8))
    ax.scatter(t_values, rel_errors, s=6, color="k")
    ax.set_xlabel("t")
    ax.set_ylabel("relative error vs oracle")
    fig.tight_layout()
    return _save_fig(fig, path)
