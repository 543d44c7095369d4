"""Figure-style report artifacts written as PNG files."""
from __future__ import annotations

import imageio.v3 as iio
import numpy as np

from .data import to_uint8


def tile_grid(rows, pad=2, fill=1.0):
    """Assemble a list of rows (lists of equally sized HxWx3 images) into one image."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    h, w = rows[0][0].shape[:2]
    grid = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad, 3), fill)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = img
    return grid


def save_grid(path, rows):
    grid = tile_grid(rows)
    iio.imwrite(path, to_uint8(grid))
    return grid


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": None})


def pca_scatter(path, coords, labels):
    """2-D embedding coloured by cluster, plus a bar chart of cluster sizes."""
    plt = _figure()
    labels = np.asarray(labels)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for c in np.unique(labels):
        sel = labels == c
        ax1.scatter(coords[sel, 0], coords[sel, 1], s=10, label=f"cluster {c}")
    ax1.set_xlabel("PC 1")
    ax1.set_ylabel("PC 2")
    ax1.legend(fontsize=7)
    ids, counts = np.unique(labels, return_counts=True)
    ax2.bar([str(i) for i in ids], counts)
    ax2.set_xlabel("cluster")
    ax2.set_ylabel("images")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def loss_curves(path, log):
    plt = _figure()
    names = [c for c in log if c != "step"]
    fig, axes = plt.subplots(2, (len(names) + 1) // 2, figsize=(12, 5))
    for ax, name in zip(np.ravel(axes), names):
        ax.plot(log["step"], log[name], lw=0.8)
        ax.set_title(name, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
