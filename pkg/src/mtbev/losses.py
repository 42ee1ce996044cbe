"""Training losses for detection, segmentation and occupancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import ConfigError
from .heads import DetectionOutput, box_regression_targets

EPS = 1e-7


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_reg: float = 0.25
    lambda_det: float = 1.0
    lambda_seg: float = 1.0
    lambda_occ: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"{name} must be non-negative")


def focal_loss(p: torch.Tensor, y: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0,
               reduction: str = "mean") -> torch.Tensor:
    """Binary focal loss on probabilities; ``p`` is clamped to [1e-7, 1 - 1e-7]."""
    p = p.clamp(EPS, 1.0 - EPS)
    y = y.to(p.dtype)
    pos = -alpha * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * p ** gamma * torch.log(1.0 - p)
    loss = y * pos + (1.0 - y) * neg
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def focal_loss_with_logits(logits: torch.Tensor, y: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0,
                           reduction: str = "mean") -> torch.Tensor:
    """Binary focal loss computed from logits.

    Equal to ``focal_loss(sigmoid(logits), y)`` away from saturation, but
    ``log p`` comes from ``logsigmoid`` so confidently wrong logits keep a
    gradient instead of hitting the probability clamp.
    """
    y = y.to(logits.dtype)
    p = torch.sigmoid(logits)
    pos = -alpha * (1.0 - p) ** gamma * F.logsigmoid(logits)
    neg = -(1.0 - alpha) * p ** gamma * F.logsigmoid(-logits)
    loss = y * pos + (1.0 - y) * neg
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def heatmap_focal_loss(logits: torch.Tensor, heatmap: torch.Tensor, gamma: float = 2.0,
                       beta: float = 4.0) -> torch.Tensor:
    """Focal loss against soft Gaussian targets (peaks at exactly 1), normalized by peak count."""
    p = torch.sigmoid(logits)
    peak = heatmap >= 1.0
    pos = -((1.0 - p) ** gamma) * F.logsigmoid(logits) * peak
    neg = -((1.0 - heatmap) ** beta) * p ** gamma * F.logsigmoid(-logits) * ~peak
    return (pos.sum() + neg.sum()) / peak.sum().clamp_min(1)


def focal_cost(logits: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Per (query, class) matching cost: positive focal term minus negative focal term."""
    p = torch.sigmoid(logits).clamp(EPS, 1.0 - EPS)
    pos = alpha * (1.0 - p) ** gamma * -torch.log(p)
    neg = (1.0 - alpha) * p ** gamma * -torch.log(1.0 - p)
    return pos - neg


def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment of columns (gt) to rows (queries)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[1] > cost.shape[0]:
        raise ConfigError(f"{cost.shape[1]} ground-truth boxes exceed {cost.shape[0]} queries")
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def detection_match_cost(pred: DetectionOutput, b: int, gt_vec: torch.Tensor, gt_cls: torch.Tensor,
                         weights: LossWeights, alpha: float, gamma: float) -> torch.Tensor:
    cls_cost = focal_cost(pred.cls_logits[b], alpha, gamma)[:, gt_cls]
    reg_cost = torch.cdist(pred.regression_vector()[b], gt_vec, p=1)
    return weights.lambda_cls * cls_cost + weights.lambda_reg * reg_cost


def detection_loss(pred: DetectionOutput, gt_boxes: list[np.ndarray], weights: LossWeights,
                   cell_m: float, extent_m: float, alpha: float = 0.25, gamma: float = 2.0) -> dict:
    """``L_det = lambda_cls * L_cls + lambda_reg * L_reg`` with Hungarian-matched targets.

    Both terms are summed over the batch and divided by the number of
    ground-truth boxes (at least 1).
    """
    bsz, n_q, k = pred.cls_logits.shape
    dtype = pred.cls_logits.dtype
    cls_target = torch.zeros_like(pred.cls_logits)
    reg_sum = pred.cls_logits.new_zeros(())
    n_gt = 0
    for b in range(bsz):
        boxes = np.asarray(gt_boxes[b], dtype=np.float64).reshape(-1, 7)
        if len(boxes) > n_q:
            raise ConfigError(f"{len(boxes)} ground-truth boxes exceed {n_q} queries")
        if len(boxes) == 0:
            continue
        gt_vec = box_regression_targets(boxes, cell_m, extent_m, dtype)
        gt_cls = torch.as_tensor(boxes[:, 6], dtype=torch.long)
        with torch.no_grad():
            cost = detection_match_cost(pred, b, gt_vec, gt_cls, weights, alpha, gamma)
        rows, cols = hungarian_match(cost.numpy())
        rows_t, cols_t = torch.as_tensor(rows), torch.as_tensor(cols)
        cls_target[b, rows_t, gt_cls[cols_t]] = 1.0
        reg_sum = reg_sum + (pred.regression_vector()[b, rows_t] - gt_vec[cols_t]).abs().sum()
        n_gt += len(boxes)
    norm = max(1, n_gt)
    l_cls = focal_loss_with_logits(pred.cls_logits, cls_target, alpha, gamma, reduction="sum") / norm
    l_reg = reg_sum / norm
    total = weights.lambda_cls * l_cls + weights.lambda_reg * l_reg
    return {"cls": l_cls, "reg": l_reg, "det": total.to(dtype)}


def segmentation_loss(logits: torch.Tensor, masks: torch.Tensor, alpha: float = 0.25,
                      gamma: float = 2.0) -> torch.Tensor:
    """Mean focal loss between sigmoid(logits) and binary masks."""
    if logits.shape != masks.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs masks {tuple(masks.shape)}")
    return focal_loss_with_logits(logits, masks, alpha, gamma)


def occupancy_class_weights(labels: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Weights proportional to 1/sqrt(frequency) for the M semantic classes, 1 for empty.

    The semantic weights are scaled to average 1 over the classes present in
    the batch. Unscaled, rare classes reach weights of ~20 against empty and the
    predicted object boundaries drift outward.
    """
    counts = torch.bincount(labels.reshape(-1), minlength=n_classes + 1).to(dtype)
    freq = counts / counts.sum()
    weights = torch.where(counts > 0, freq.clamp_min(1e-12).rsqrt(), torch.zeros_like(freq))
    present = counts[:n_classes] > 0
    if bool(present.any()):
        weights[:n_classes] = weights[:n_classes] / weights[:n_classes][present].mean()
    weights[n_classes] = 1.0
    return weights


def occupancy_loss(logits: torch.Tensor, labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Class-weighted cross-entropy; logits (B, H', W', Z', M+1), labels (B, H', W', Z')."""
    labels = labels.long()
    if bool((labels < 0).any()) or bool((labels > n_classes).any()):
        raise ValueError(f"occupancy labels must lie in [0, {n_classes}]")
    if logits.shape[:-1] != labels.shape or logits.shape[-1] != n_classes + 1:
        raise ValueError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    weight = occupancy_class_weights(labels, n_classes, logits.dtype)
    return F.cross_entropy(logits.movedim(-1, 1), labels, weight=weight)


def total_loss(l_det, l_seg, l_occ, weights: LossWeights):
    return weights.lambda_det * l_det + weights.lambda_seg * l_seg + weights.lambda_occ * l_occ
