"""Detection AUC and localisation IoU, including the grouped-IoU protocol."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Equals P(score of a random anomalous item > score of a random normal item),
    with ties counting one half. ``labels`` are 1 for anomalous, 0 for normal.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both normal and anomalous examples")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def iou(pred, truth) -> float:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def threshold_grid(n: int = 51) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def iou_table(maps: list[np.ndarray], masks: list[np.ndarray], thresholds) -> np.ndarray:
    """IoU of every map against its mask at every threshold: (n_images, n_thresholds)."""
    out = np.empty((len(maps), len(thresholds)))
    for i, (m, gt) in enumerate(zip(maps, masks)):
        for j, t in enumerate(thresholds):
            out[i, j] = iou(m >= t, gt)
    return out


def grouped_iou(
    maps: list[np.ndarray],
    masks: list[np.ndarray],
    group_size: int = 100,
    n_groups: int = 5,
    seed: int = 0,
    threshold: float | None = None,
    n_thresholds: int = 51,
) -> dict:
    """Mean IoU over ``n_groups`` random groups of ``group_size`` anomalous images.

    ``maps`` are per-pixel score maps (or objects with a ``pixel_map``). With
    ``threshold=None`` the single threshold on a fixed ``n_thresholds`` grid in
    [0, 1] that maximises mean IoU over the sampled images is used; otherwise
    the given threshold is applied. Groups are drawn without replacement inside
    each group, independently across groups.
    """
    maps = [getattr(m, "pixel_map", m) for m in maps]
    if len(maps) != len(masks):
        raise MetricError("need one ground-truth mask per map")
    if any(m is None for m in masks):
        raise MetricError("every entry needs a ground-truth mask")
    if len(maps) < group_size:
        raise MetricError(f"population of {len(maps)} is smaller than the group size {group_size}")
    rng = np.random.default_rng(seed)
    groups = [np.sort(rng.choice(len(maps), size=group_size, replace=False)) for _ in range(n_groups)]
    thresholds = threshold_grid(n_thresholds) if threshold is None else np.array([threshold])
    table = iou_table(maps, masks, thresholds)
    sampled = np.concatenate(groups)
    best = int(np.argmax(table[sampled].mean(axis=0)))
    per_group = [float(table[g, best].mean()) for g in groups]
    return {
        "mean_iou": float(np.mean(per_group)),
        "per_group": per_group,
        "threshold": float(thresholds[best]),
        "groups": [g.tolist() for g in groups],
    }
