"""Evaluation reports and score exports."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import EvalConfig, to_dict
from .data import ANOMALOUS, LabeledTestSet
from .metrics import MetricError, grouped_iou, roc_auc
from .scoring import AnomalyResult

SCORES_HEADER = ["image_id", "label", "score"]


def config_fingerprint(*records) -> str:
    """Short SHA-256 over the canonical JSON of dataclass configs."""
    payload = json.dumps([to_dict(r) for r in records], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    detection_auc: float
    n_normal: int
    n_anomalous: int
    iou_best: dict | None  # grouped IoU at the best grid threshold
    iou_fixed: dict | None  # grouped IoU at the configured fixed threshold
    table: list[dict] = field(default_factory=list)  # image_id, label, score
    config_fingerprint: str = ""
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [
            f"images        {self.n_normal} normal, {self.n_anomalous} anomalous",
            f"detection AUC {self.detection_auc:.3f}",
        ]
        for name, block in (("best", self.iou_best), ("fixed", self.iou_fixed)):
            if block is None:
                continue
            groups = " ".join(f"{v:.3f}" for v in block["per_group"])
            lines.append(
                f"IoU ({name} t={block['threshold']:.2f}) {block['mean_iou']:.3f}  groups: {groups}"
            )
        lines += [f"note: {n}" for n in self.notes]
        if self.config_fingerprint:
            lines.append(f"config        {self.config_fingerprint}")
        return "\n".join(lines)


def evaluate_scores(
    ids: list[str],
    labels: list[str],
    scores,
    results: list[AnomalyResult] | None = None,
    masks: list | None = None,
    config: EvalConfig | None = None,
    fingerprint: str = "",
) -> EvalReport:
    """AUC from image scores; grouped IoU when localisation maps and masks are given."""
    config = config or EvalConfig()
    scores = np.asarray(scores, dtype=np.float64)
    y = np.array([1 if l == ANOMALOUS else 0 for l in labels])
    n_anom = int(y.sum())
    if n_anom == 0 or n_anom == len(y):
        raise MetricError(
            f"cannot compute detection AUC: test set has {len(y) - n_anom} normal and "
            f"{n_anom} anomalous images; both classes are required"
        )
    notes = []
    iou_best = iou_fixed = None
    if results is not None and masks is not None:
        idx = [i for i, (l, m) in enumerate(zip(labels, masks)) if l == ANOMALOUS and m is not None]
        if len(idx) >= config.group_size:
            maps = [results[i].pixel_map for i in idx]
            gts = [masks[i] for i in idx]
            kw = dict(group_size=config.group_size, n_groups=config.n_groups, seed=config.seed)
            iou_best = grouped_iou(maps, gts, n_thresholds=config.n_thresholds, **kw)
            iou_fixed = grouped_iou(maps, gts, threshold=config.threshold, **kw)
        else:
            notes.append(
                f"grouped IoU skipped: {len(idx)} anomalous images with masks, "
                f"group size is {config.group_size}"
            )
    table = [
        {"image_id": i, "label": l, "score": float(s)} for i, l, s in zip(ids, labels, scores)
    ]
    return EvalReport(
        detection_auc=roc_auc(scores, y),
        n_normal=len(y) - n_anom,
        n_anomalous=n_anom,
        iou_best=iou_best,
        iou_fixed=iou_fixed,
        table=table,
        config_fingerprint=fingerprint,
        notes=notes,
    )


def evaluate(
    test: LabeledTestSet,
    results: list[AnomalyResult],
    config: EvalConfig | None = None,
    fingerprint: str = "",
) -> EvalReport:
    return evaluate_scores(
        test.ids, test.labels, [r.image_score for r in results], results, test.masks, config,
        fingerprint,
    )


def write_scores_csv(path: str | Path, ids, labels, scores) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for i, l, s in zip(ids, labels, scores):
            writer.writerow([i, l, repr(float(s))])


def read_scores_csv(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORES_HEADER:
            raise ValueError(f"{path}: expected columns {','.join(SCORES_HEADER)}")
        rows = list(reader)
    return (
        [r["image_id"] for r in rows],
        [r["label"] for r in rows],
        np.array([float(r["score"]) for r in rows]),
    )


def result_record(result: AnomalyResult, label: str | None = None, heatmap: str | None = None) -> dict:
    return {
        "image_id": result.image_id,
        "label": label,
        "image_score": result.image_score,
        "seeds": list(result.seeds_used),
        "never_masked": list(result.never_masked),
        "patch_scores": np.asarray(result.patch_scores).tolist(),
        "heatmap": heatmap,
    }
