"""Evaluation metrics: center-distance mAP, segmentation IoU, occupancy mIoU."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

DIST_THRESHOLDS = (0.5, 1.0, 2.0)


@dataclass
class MetricsRecord:
    """One line of the metrics log: step, per-task losses and evaluation metrics."""

    step: int
    losses: dict[str, float] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.losses.items():
            if not math.isfinite(value):
                raise FloatingPointError(f"loss {name} is not finite: {value}")
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name}={value} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "losses": self.losses, "metrics": self.metrics}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        return cls(d["step"], d.get("losses", {}), d.get("metrics", {}))


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision/recall curve with all-point interpolation.

    ``tp`` is the true-positive flag of every prediction, sorted by descending score.
    """
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope, then sum over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def greedy_match(pred_xy: np.ndarray, scores: np.ndarray, gt_xy: np.ndarray, thresh: float) -> np.ndarray:
    """TP flags for predictions in descending score order; each gt is claimed at most once.

    A prediction takes the nearest unclaimed gt within ``thresh`` meters.
    Score ties keep the original prediction order.
    """
    order = np.argsort(-scores, kind="stable")
    claimed = np.zeros(len(gt_xy), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        if len(gt_xy) == 0:
            break
        d = np.linalg.norm(gt_xy - pred_xy[i], axis=1)
        d[claimed] = np.inf
        j = int(np.argmin(d))
        if d[j] <= thresh:
            claimed[j] = True
            tp[rank] = True
    return tp


def detection_map(preds: list[dict], gts: list[np.ndarray], n_classes: int,
                  thresholds=DIST_THRESHOLDS) -> dict[str, float]:
    """Simplified mAP over classes with ground truth and the distance thresholds.

    Args:
        preds: per sample, ``{"xy": (n, 2), "scores": (n,), "labels": (n,)}``.
        gts: per sample, box rows ``[x, y, l, w, yaw, height, cls]``.
        n_classes: number of detection classes.
        thresholds: center-distance thresholds in meters.

    Returns:
        ``{"mAP": ..., "AP/<cls>": ...}``. mAP is 0 if no class has ground truth.
    """
    out = {}
    aps = []
    for k in range(n_classes):
        n_gt = sum(int((np.asarray(g).reshape(-1, 7)[:, 6] == k).sum()) for g in gts)
        if n_gt == 0:
            continue
        per_thresh = []
        for t in thresholds:
            flags, scores = [], []
            for p, g in zip(preds, gts):
                g = np.asarray(g).reshape(-1, 7)
                sel = np.asarray(p["labels"]) == k
                xy, sc = np.asarray(p["xy"])[sel], np.asarray(p["scores"])[sel]
                gxy = g[g[:, 6] == k][:, :2]
                tp = greedy_match(xy, sc, gxy, t)
                flags.append(tp)
                scores.append(np.sort(sc)[::-1] if len(sc) else sc)
            flags = np.concatenate(flags) if flags else np.zeros(0, bool)
            scores = np.concatenate(scores) if scores else np.zeros(0)
            # merge samples by score; ties stay in sample order
            order = np.argsort(-scores, kind="stable")
            per_thresh.append(average_precision(flags[order], n_gt))
        out[f"AP/{k}"] = float(np.mean(per_thresh))
        aps.append(out[f"AP/{k}"])
    out["mAP"] = float(np.mean(aps)) if aps else 0.0
    return out


class IoUAccumulator:
    """Dataset-level per-class intersection and union counts."""

    def __init__(self, n_classes: int):
        self.inter = np.zeros(n_classes, dtype=np.int64)
        self.union = np.zeros(n_classes, dtype=np.int64)

    def add_binary(self, pred: np.ndarray, gt: np.ndarray) -> None:
        """Multi-label masks with the class on the last axis."""
        pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
        axes = tuple(range(pred.ndim - 1))
        self.inter += (pred & gt).sum(axis=axes)
        self.union += (pred | gt).sum(axis=axes)

    def add_labels(self, pred: np.ndarray, gt: np.ndarray) -> None:
        """Single-label volumes; only classes ``0..n-1`` are counted."""
        pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
        for k in range(len(self.inter)):
            p, g = pred == k, gt == k
            self.inter[k] += int((p & g).sum())
            self.union[k] += int((p | g).sum())

    def per_class(self) -> np.ndarray:
        """IoU per class; NaN where the class never appears in prediction or gt."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), np.nan)

    def mean(self) -> float:
        iou = self.per_class()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else 0.0
