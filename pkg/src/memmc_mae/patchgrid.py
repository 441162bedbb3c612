"""Image <-> patch-token conversion, mask sampling and 2-D sine-cosine embeddings.

Images are channel-last arrays ``(H, W, R)``. Patches are numbered in row-major
raster order over the patch grid, and each patch row is the raster flattening
of its ``(p, p, R)`` block. The batched helpers accept numpy arrays or torch
tensors with arbitrary leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PatchShapeError(ValueError):
    """Raised when an image or patch grid has inconsistent dimensions."""


@dataclass
class PatchGrid:
    patches: np.ndarray  # (num_patches, p * p * R)
    patch_side: int
    grid_dims: tuple[int, int]
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid_dims[0] * self.grid_dims[1]


@dataclass(frozen=True)
class MaskPartition:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    seed: int
    ratio: float

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    def masked_flags(self) -> np.ndarray:
        flags = np.zeros(self.num_patches, dtype=bool)
        flags[self.masked_idx] = True
        return flags


def to_patches(images, patch_side: int):
    """``(..., H, W, R) -> (..., num_patches, p*p*R)`` for numpy arrays or tensors."""
    *lead, h, w, r = images.shape
    p = patch_side
    if h % p or w % p:
        raise PatchShapeError(f"image {h}x{w} is not divisible by patch side {p}")
    gh, gw = h // p, w // p
    n = len(lead)
    x = images.reshape(*lead, gh, p, gw, p, r)
    x = x.swapaxes(n + 1, n + 2)  # (..., gh, gw, p, p, r)
    return x.reshape(*lead, gh * gw, p * p * r)


def from_patches(patches, patch_side: int, grid_dims: tuple[int, int], channels: int):
    """Inverse of :func:`to_patches`."""
    *lead, num, dim = patches.shape
    gh, gw = grid_dims
    p = patch_side
    if num != gh * gw or dim != p * p * channels:
        raise PatchShapeError(
            f"patch array {tuple(patches.shape)} does not match grid {grid_dims}, "
            f"patch side {p}, {channels} channel(s)"
        )
    n = len(lead)
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    x = x.swapaxes(n + 1, n + 2)
    return x.reshape(*lead, gh * p, gw * p, channels)


def patchify(image: np.ndarray, patch_side: int) -> PatchGrid:
    image = np.asarray(image)
    if image.ndim != 3:
        raise PatchShapeError(f"expected an (H, W, R) image, got shape {image.shape}")
    h, w, r = image.shape
    patches = to_patches(image, patch_side)
    return PatchGrid(patches, patch_side, (h // patch_side, w // patch_side), r)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return from_patches(np.asarray(grid.patches), grid.patch_side, grid.grid_dims, grid.channels)


def visible_count(num_patches: int, ratio: float) -> int:
    """round((1 - ratio) * n), with exact halves rounded down."""
    keep = (1.0 - ratio) * num_patches
    return int(math.floor(keep + 0.5 - 1e-9))


def sample_mask(num_patches: int, ratio: float, seed: int) -> MaskPartition:
    """Uniformly random visible/masked split of ``range(num_patches)``, fixed by ``seed``."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if num_patches < 2:
        raise ValueError(f"need at least 2 patches, got {num_patches}")
    keep = visible_count(num_patches, ratio)
    order = np.random.default_rng(seed).permutation(num_patches)
    return MaskPartition(
        visible_idx=np.sort(order[:keep]),
        masked_idx=np.sort(order[keep:]),
        seed=seed,
        ratio=ratio,
    )


def _sincos_1d(width: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(width // 2, dtype=np.float64) / (width / 2.0)
    omega = 1.0 / 10000**omega
    out = np.outer(positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def positional_table(grid_dims: tuple[int, int], width: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape ``(rows * cols, width)``.

    The first half of each row encodes the grid row, the second half the grid
    column, each with the usual 1-D sin/cos frequency ladder (base 10000).
    """
    if width % 2 or width <= 0:
        raise ValueError(f"positional width must be a positive even number, got {width}")
    rows, cols = grid_dims
    # row and column halves must each be even to split into sin and cos
    row_width = 2 * ((width + 2) // 4)
    gy, gx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    parts = [_sincos_1d(row_width, gy)]
    if width - row_width:
        parts.append(_sincos_1d(width - row_width, gx))
    return np.concatenate(parts, axis=1)
