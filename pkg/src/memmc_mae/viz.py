"""Heatmaps, reconstruction triptychs and loss-curve plots."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .patchgrid import MaskPartition


def _to_pil(img: np.ndarray) -> Image.Image:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return Image.fromarray(arr)


def save_heatmap(path: str | Path, pixel_map: np.ndarray) -> None:
    """Grayscale PNG of a [0, 1] score map; brighter is more anomalous."""
    _to_pil(np.asarray(pixel_map)).save(path)


def masked_view(image: np.ndarray, partition: MaskPartition, patch_side: int, fill: float = 0.0) -> np.ndarray:
    """The image with every masked patch blanked to ``fill``."""
    out = np.array(image, dtype=np.float32, copy=True)
    cols = out.shape[1] // patch_side
    for idx in partition.masked_idx:
        r, c = divmod(int(idx), cols)
        out[r * patch_side:(r + 1) * patch_side, c * patch_side:(c + 1) * patch_side] = fill
    return out


def triptych(image: np.ndarray, reconstruction: np.ndarray, partition: MaskPartition,
             patch_side: int, gap: int = 2) -> np.ndarray:
    """Masked input | reconstruction | ground truth, side by side, (H, 3W + 2 gap, R)."""
    h, w, r = image.shape
    spacer = np.ones((h, gap, r), dtype=np.float32)
    panels = [masked_view(image, partition, patch_side), np.asarray(reconstruction, np.float32), image]
    return np.concatenate([panels[0], spacer, panels[1], spacer, panels[2]], axis=1)


def save_triptych(path: str | Path, image, reconstruction, partition: MaskPartition, patch_side: int,
                  scale: int = 2) -> None:
    im = _to_pil(triptych(np.asarray(image, np.float32), reconstruction, partition, patch_side))
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path)


def plot_loss_curve(path: str | Path, rows) -> None:
    """Per-step loss with per-epoch means from ``epoch,step,loss,lr`` rows."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = np.asarray([[r[0], r[1], r[2]] for r in rows], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if len(rows):
        ax.plot(rows[:, 1], rows[:, 2], lw=0.5, alpha=0.4, label="step")
        epochs = np.unique(rows[:, 0])
        ends = [rows[rows[:, 0] == e, 1].max() for e in epochs]
        means = [rows[rows[:, 0] == e, 2].mean() for e in epochs]
        ax.plot(ends, means, lw=1.5, label="epoch mean")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("masked-patch MSE")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
