"""Evaluation metrics: depth error, segmentation scores, reconstruction quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import UNLABELED, LabeledCloud

DEFAULT_DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


class UndefinedMetricsError(ValueError):
    """No valid elements to evaluate over."""


@dataclass
class DepthMetrics:
    rel: float
    log10: float
    rms: float
    delta_acc: list[tuple[float, float]]   # (threshold, fraction)

    def as_dict(self) -> dict[str, float]:
        out = {"rel": self.rel, "log10": self.log10, "rms": self.rms}
        for t, frac in self.delta_acc:
            out[f"delta<{t:g}"] = frac
        return out


@dataclass
class SegMetrics:
    pixel_acc: float
    mean_acc: float
    iou: float
    per_class: dict[int, tuple[float, float]]   # label -> (accuracy, iou)

    def as_dict(self) -> dict[str, float]:
        return {"pixel_acc": self.pixel_acc, "mean_acc": self.mean_acc, "iou": self.iou}


@dataclass
class ReconMetrics:
    accuracy: float        # meters, mean recon -> nearest gt distance
    completeness: float    # fraction of gt points covered within threshold
    threshold: float

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "completeness": self.completeness,
                "threshold": self.threshold}


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  thresholds=DEFAULT_DELTA_THRESHOLDS) -> DepthMetrics:
    """rel, log10, rms and delta-threshold accuracy over the valid pixels.

    rel    = mean |d - d*| / d*
    rms    = sqrt(mean (d - d*)^2)
    log10  = mean |log10 d - log10 d*|
    delta  = fraction with max(d*/d, d/d*) < t

    A pixel counts only when both rasters are finite and positive there.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = np.isfinite(pred) & np.isfinite(gt) & (pred > 0) & (gt > 0)
    if not valid.any():
        raise UndefinedMetricsError("no pixel is valid in both depth rasters")
    d = pred[valid]
    ds = gt[valid]
    rel = float(np.mean(np.abs(d - ds) / ds))
    rms = float(np.sqrt(np.mean((d - ds) ** 2)))
    log10 = float(np.mean(np.abs(np.log10(d) - np.log10(ds))))
    ratio = np.maximum(ds / d, d / ds)
    deltas = [(float(t), float(np.mean(ratio < t))) for t in thresholds]
    return DepthMetrics(rel, log10, rms, deltas)


def seg_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> SegMetrics:
    """Pixel accuracy, mean class accuracy and mean IoU from a confusion matrix.

    Ground-truth pixels marked UNLABELED are excluded. Mean accuracy and mean
    IoU average over classes with nonzero ground-truth support only.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = gt != UNLABELED
    p = pred[mask].astype(np.int64)
    g = gt[mask].astype(np.int64)
    if p.size == 0:
        raise UndefinedMetricsError("all ground-truth pixels are unlabeled")
    if (p < 0).any() or (p >= num_classes).any() or (g < 0).any() or (g >= num_classes).any():
        raise ValueError("label id outside [0, num_classes)")
    confusion = np.bincount(g * num_classes + p,
                            minlength=num_classes ** 2).reshape(num_classes, num_classes)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    diag = np.diag(confusion)
    present = support > 0
    if not present.any():
        raise UndefinedMetricsError("no class has ground-truth support")
    pixel_acc = float(diag.sum() / confusion.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        class_acc = np.where(present, diag / support, np.nan)
        union = support + predicted - diag
        class_iou = np.where(present, diag / union, np.nan)
    mean_acc = float(np.nanmean(class_acc[present]))
    iou = float(np.nanmean(class_iou[present]))
    per_class = {int(c): (float(class_acc[c]), float(class_iou[c]))
                 for c in np.flatnonzero(present)}
    return SegMetrics(pixel_acc, mean_acc, iou, per_class)


def recon_metrics(recon: LabeledCloud, gt: LabeledCloud, threshold: float) -> ReconMetrics:
    """Accuracy and completeness of a reconstruction against ground truth.

    Accuracy: mean distance from each reconstructed point to its nearest
    ground-truth point. Completeness: fraction of ground-truth points whose
    nearest reconstructed point lies within the threshold. Nearest neighbors
    are exact (kd-tree, no approximation).
    """
    if len(recon) == 0 or len(gt) == 0:
        raise UndefinedMetricsError("reconstruction metrics need two non-empty clouds")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d_recon_to_gt, _ = cKDTree(gt.positions).query(recon.positions, k=1, workers=-1)
    d_gt_to_recon, _ = cKDTree(recon.positions).query(gt.positions, k=1, workers=-1)
    return ReconMetrics(float(np.mean(d_recon_to_gt)),
                        float(np.mean(d_gt_to_recon <= threshold)),
                        float(threshold))
