"""Test-time anomaly scoring: patch-level MS-SSIM pooled over random mask seeds."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import MsSsimParams, ScoringConfig
from .model import MemMCMAE
from .patchgrid import from_patches, sample_mask, to_patches

logger = logging.getLogger(__name__)

# Wang et al. five-scale exponents; fewer scales use the leading ones, renormalised
STANDARD_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class UntrainedModelWarning(UserWarning):
    pass


def scale_weights(params: MsSsimParams) -> np.ndarray:
    if params.weights is not None:
        w = np.asarray(params.weights, dtype=np.float64)
        if len(w) != params.scales:
            raise ValueError(f"{len(w)} weights given for {params.scales} scales")
    else:
        if params.scales > len(STANDARD_WEIGHTS):
            raise ValueError(f"no standard weights for {params.scales} scales; pass weights")
        w = np.asarray(STANDARD_WEIGHTS[: params.scales])
    if (w <= 0).any():
        raise ValueError("MS-SSIM weights must be positive")
    return w / w.sum()


def _gaussian_window(side: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(side, dtype=dtype) - (side - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' Gaussian filter over (B, C, H, W), channels independent."""
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.reshape(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.reshape(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_terms(a, b, win, c1, c2):
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    var_a = _blur(a * a, win) - mu_a**2
    var_b = _blur(b * b, win) - mu_b**2
    cov = _blur(a * b, win) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance.mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ms_ssim_batch(a: torch.Tensor, b: torch.Tensor, params: MsSsimParams | None = None) -> torch.Tensor:
    """MS-SSIM of (B, C, H, W) batches, averaged over channels; returns (B,).

    Contrast-structure terms from every scale and the luminance term from the
    coarsest scale are combined as a weighted geometric product. Negative
    contrast-structure means are clamped to zero so the result stays in [0, 1].
    """
    params = params or MsSsimParams()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    weights = torch.as_tensor(scale_weights(params), dtype=torch.float64)
    coarsest = min(a.shape[-2:]) // 2 ** (params.scales - 1)
    if coarsest < params.window_side:
        raise ValueError(
            f"image side {min(a.shape[-2:])} is {coarsest}px at the coarsest of {params.scales} "
            f"scales, smaller than the {params.window_side}px window"
        )
    a = a.to(torch.float64)
    b = b.to(torch.float64)
    win = _gaussian_window(params.window_side, params.sigma, torch.float64)
    result = torch.ones(a.shape[:2], dtype=torch.float64)
    for j in range(params.scales):
        lum, cs = _ssim_terms(a, b, win, params.c1, params.c2)
        result = result * cs.clamp(min=0) ** weights[j]
        if j < params.scales - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    result = result * lum ** weights[-1]
    return result.mean(dim=1)


def ms_ssim(a, b, params: MsSsimParams | None = None) -> float:
    """MS-SSIM between two (H, W, R) images with non-negative pixel values."""
    ta = torch.as_tensor(np.asarray(a, dtype=np.float64))
    tb = torch.as_tensor(np.asarray(b, dtype=np.float64))
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.ndim != 3:
        raise ValueError("expected (H, W, R) images")
    if (ta < 0).any() or (tb < 0).any():
        raise ValueError("MS-SSIM needs non-negative pixel values")
    return float(ms_ssim_batch(ta.permute(2, 0, 1)[None], tb.permute(2, 0, 1)[None], params)[0])


# -- per-patch scoring -------------------------------------------------------------


@dataclass
class AnomalyResult:
    patch_scores: np.ndarray  # (rows, cols) dissimilarities in [0, 1]
    pixel_map: np.ndarray  # (H, W)
    image_score: float
    seeds_used: list[int]
    never_masked: list[int] = field(default_factory=list)
    image_id: str | None = None


def context_windows(grid_dims: tuple[int, int], context: int) -> np.ndarray:
    """Top-left patch coordinates of a ``context`` x ``context`` window per patch.

    Windows are centred on their patch and shifted inwards at the borders.
    """
    rows, cols = grid_dims
    if context > min(rows, cols):
        raise ValueError(f"context of {context} patches exceeds the {rows}x{cols} grid")
    gy, gx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    top = np.clip(gy - context // 2, 0, rows - context)
    left = np.clip(gx - context // 2, 0, cols - context)
    return np.stack([top.ravel(), left.ravel()], axis=1)


def patch_dissimilarity(
    reconstruction: torch.Tensor,
    images: torch.Tensor,
    patch_side: int,
    context: int,
    params: MsSsimParams,
) -> torch.Tensor:
    """1 - MS-SSIM over each patch's context window; (B, H, W, R) -> (B, num_patches)."""
    b, h, w, r = images.shape
    grid = (h // patch_side, w // patch_side)
    corners = context_windows(grid, context) * patch_side
    side = context * patch_side
    # unfold every window position, then pick the ones anchored at patch corners
    def windows(x):
        x = x.permute(0, 3, 1, 2).to(torch.float64)
        cols = F.unfold(x, kernel_size=side, stride=patch_side)  # (B, r*side*side, L)
        n_x = (w - side) // patch_side + 1
        pick = torch.as_tensor((corners[:, 0] // patch_side) * n_x + corners[:, 1] // patch_side)
        cols = cols[:, :, pick]  # (B, r*side*side, P)
        return cols.permute(0, 2, 1).reshape(b * len(pick), r, side, side)

    sim = ms_ssim_batch(windows(reconstruction), windows(images), params)
    return (1.0 - sim).clamp(0.0, 1.0).reshape(b, -1)


def _fill_never_masked(scores: np.ndarray, counts: np.ndarray, grid_dims) -> tuple[np.ndarray, list[int]]:
    missing = np.flatnonzero(counts == 0)
    if len(missing) == 0:
        return scores, []
    rows, cols = grid_dims
    covered = counts > 0
    filled = scores.copy()
    fallback = scores[covered].mean() if covered.any() else 0.0
    for idx in missing:
        y, x = divmod(int(idx), cols)
        neigh = [
            (y + dy) * cols + (x + dx)
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
            if 0 <= y + dy < rows and 0 <= x + dx < cols and covered[(y + dy) * cols + (x + dx)]
        ]
        filled[idx] = scores[neigh].mean() if neigh else fallback
    logger.warning("%d patch(es) never masked across seeds; filled from neighbours", len(missing))
    return filled, missing.tolist()


def upsample_scores(patch_scores: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    grid = torch.as_tensor(patch_scores, dtype=torch.float64)[None, None]
    out = F.interpolate(grid, size=size, mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


@torch.no_grad()
def score_images(
    model: MemMCMAE,
    images,
    config: ScoringConfig | None = None,
    ids: list[str] | None = None,
    batch_size: int = 64,
) -> list[AnomalyResult]:
    """Score a stack of (H, W, R) images; one :class:`AnomalyResult` per image."""
    config = config or ScoringConfig()
    seeds = config.seeds
    if len(seeds) < 1:
        raise ValueError("need at least one mask seed")
    if getattr(model, "epochs_trained", 0) == 0:
        warnings.warn("scoring with an untrained model", UntrainedModelWarning, stacklevel=2)
    cfg = model.config
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    n = images.shape[0]
    p, grid = cfg.patch_side, cfg.grid_dims
    num = cfg.num_patches
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype

    score_sum = np.zeros((n, num))
    counts = np.zeros((n, num))
    pred_sum = torch.zeros((n, num, cfg.patch_dim), dtype=torch.float64)
    for seed in seeds:
        part = sample_mask(num, config.mask_ratio, seed)
        masked = torch.from_numpy(part.masked_flags())
        for start in range(0, n, batch_size):
            x = images[start:start + batch_size]
            vis = torch.as_tensor(part.visible_idx, dtype=torch.long).expand(x.shape[0], -1)
            pred = model(x.to(dtype), vis).to(torch.float64).clamp(0.0, 1.0)
            target = to_patches(x.to(torch.float64), p)
            # visible patches are pasted back from the input; only masked ones are predicted
            composite = torch.where(masked[None, :, None], pred, target)
            if config.pooling == "score":
                recon = from_patches(composite, p, grid, cfg.channels)
                d = patch_dissimilarity(recon, x, p, config.context_patches, config.ms_ssim)
                score_sum[start:start + len(x)] += (d * masked).numpy()
            else:
                pred_sum[start:start + len(x)] += torch.where(masked[None, :, None], pred, 0.0)
        counts += part.masked_flags()[None, :]

    if config.pooling == "reconstruction":
        safe = np.maximum(counts, 1)[..., None]
        target = to_patches(images.to(torch.float64), p)
        mean_pred = pred_sum / torch.as_tensor(safe)
        composite = torch.where(torch.as_tensor(counts > 0)[..., None], mean_pred, target)
        recon = from_patches(composite, p, grid, cfg.channels)
        d = np.concatenate([
            patch_dissimilarity(recon[s:s + batch_size], images[s:s + batch_size], p,
                                config.context_patches, config.ms_ssim).numpy()
            for s in range(0, n, batch_size)
        ])
        score_sum = np.where(counts > 0, d, 0.0)
        counts = (counts > 0).astype(float)

    if was_training:
        model.train()
    results = []
    h, w = cfg.image_size, cfg.image_size
    for i in range(n):
        raw = np.where(counts[i] > 0, score_sum[i] / np.maximum(counts[i], 1), 0.0)
        pooled, missing = _fill_never_masked(raw, counts[i], grid)
        patch_scores = pooled.reshape(grid)
        results.append(
            AnomalyResult(
                patch_scores=patch_scores,
                pixel_map=upsample_scores(patch_scores, (h, w)),
                image_score=float(patch_scores.mean()),
                seeds_used=list(seeds),
                never_masked=missing,
                image_id=ids[i] if ids else None,
            )
        )
    return results


def score_image(
    image, model: MemMCMAE, n_seeds: int = 10, ratio: float = 0.75,
    config: ScoringConfig | None = None,
) -> AnomalyResult:
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    base = config or ScoringConfig()
    cfg = ScoringConfig(
        n_seeds=n_seeds, mask_ratio=ratio, context_patches=base.context_patches,
        seed_offset=base.seed_offset, pooling=base.pooling, ms_ssim=base.ms_ssim,
    )
    return score_images(model, np.asarray(image)[None], cfg)[0]


def localization_mask(result: AnomalyResult, threshold: float) -> np.ndarray:
    """Binary (H, W) mask of pixels whose score reaches ``threshold``."""
    return (result.pixel_map >= threshold).astype(np.uint8)
