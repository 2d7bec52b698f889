"""Segmentation quality measures over thresholded probability maps.

All ratios use a zero sentinel plus a degenerate flag instead of raising
on empty denominators, so sweeps over extreme thresholds stay total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .models import Network
from .tensor import ShapeError
from .training import normalize_input

METRIC_COLUMNS = ("acc", "se", "sp", "prec", "f1", "mcc", "iou_fg", "miou", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_pair(prob: np.ndarray, gt: np.ndarray,
                fov: Optional[np.ndarray]) -> np.ndarray:
    if prob.ndim != 2 or gt.shape != prob.shape:
        raise ShapeError(
            f"probability map {prob.shape} and ground truth {gt.shape} must be "
            "matching 2-d arrays")
    if not np.all(np.isfinite(prob)):
        raise ValueError("probability map contains non-finite values")
    if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    bad = ~np.isin(gt, (0, 1))
    if np.any(bad):
        raise ValueError("ground truth must be binary")
    if fov is None:
        return np.ones(prob.shape, dtype=bool)
    if fov.shape != prob.shape:
        raise ShapeError(f"field-of-view mask {fov.shape} does not match {prob.shape}")
    return fov.astype(bool)


def confusion(prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5,
              fov: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Counts for pred = (prob >= threshold), restricted to the fov mask."""
    keep = _check_pair(prob, gt, fov)
    pred = prob >= threshold
    pos = gt.astype(bool)
    tp = int(np.sum(pred & pos & keep))
    fp = int(np.sum(pred & ~pos & keep))
    fn = int(np.sum(~pred & pos & keep))
    tn = int(np.sum(~pred & ~pos & keep))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> Tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


@dataclass(frozen=True)
class BasicMetrics:
    acc: float
    se: float
    sp: float
    prec: float
    f1: float
    degenerate: bool


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    acc, d0 = _ratio(c.tp + c.tn, c.total)
    se, d1 = _ratio(c.tp, c.tp + c.fn)
    sp, d2 = _ratio(c.tn, c.tn + c.fp)
    prec, d3 = _ratio(c.tp, c.tp + c.fp)
    f1, d4 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return BasicMetrics(acc, se, sp, prec, f1, d0 or d1 or d2 or d3 or d4)


def mcc(c: ConfusionCounts) -> Tuple[float, bool]:
    """Correlation between prediction and truth via prevalence S and
    predicted-positive rate P: (tp/n - s*p) / sqrt(p*s*(1-p)*(1-s))."""
    n = c.total
    if n == 0:
        return 0.0, True
    s = (c.tp + c.fn) / n
    p = (c.tp + c.fp) / n
    radicand = p * s * (1.0 - p) * (1.0 - s)
    if radicand <= 0.0:
        return 0.0, True
    return float((c.tp / n - s * p) / np.sqrt(radicand)), False


def iou_foreground(c: ConfusionCounts) -> Tuple[float, bool]:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def iou_background(c: ConfusionCounts) -> Tuple[float, bool]:
    return _ratio(c.tn, c.tn + c.fp + c.fn)


def miou(c: ConfusionCounts) -> Tuple[float, bool]:
    fg, d0 = iou_foreground(c)
    bg, d1 = iou_background(c)
    return 0.5 * (fg + bg), d0 or d1


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    degenerate: bool


def roc_curve(prob: np.ndarray, gt: np.ndarray,
              fov: Optional[np.ndarray] = None) -> RocCurve:
    """Exact sweep over every distinct probability as a threshold; ties
    move together, which matches the rank statistic with half-credit ties."""
    keep = _check_pair(prob, gt, fov)
    p = prob[keep].ravel()
    y = gt[keep].ravel().astype(bool)
    pos = int(np.sum(y))
    neg = y.size - pos
    if pos == 0 or neg == 0:
        return RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 0.0, True)
    order = np.argsort(-p, kind="stable")
    sorted_p = p[order]
    sorted_y = y[order]
    cum_tp = np.cumsum(sorted_y)
    cum_fp = np.cumsum(~sorted_y)
    last_of_group = np.nonzero(np.diff(sorted_p))[0]
    idx = np.concatenate([last_of_group, [p.size - 1]])
    tpr = np.concatenate([[0.0], cum_tp[idx] / pos])
    fpr = np.concatenate([[0.0], cum_fp[idx] / neg])
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) * 0.5)
    return RocCurve(fpr, tpr, area, False)


def auc(prob: np.ndarray, gt: np.ndarray,
        fov: Optional[np.ndarray] = None) -> Tuple[float, bool]:
    curve = roc_curve(prob, gt, fov)
    return curve.auc, curve.degenerate


def metric_record(prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5,
                  fov: Optional[np.ndarray] = None) -> Dict[str, float]:
    """All reported measures for one image, keyed by column name."""
    c = confusion(prob, gt, threshold, fov)
    basics = basic_metrics(c)
    mcc_value, _ = mcc(c)
    fg, _ = iou_foreground(c)
    mean_iou, _ = miou(c)
    auc_value, _ = auc(prob, gt, fov)
    return {
        "acc": basics.acc,
        "se": basics.se,
        "sp": basics.sp,
        "prec": basics.prec,
        "f1": basics.f1,
        "mcc": mcc_value,
        "iou_fg": fg,
        "miou": mean_iou,
        "auc": auc_value,
    }


def write_metrics_csv(path, rows: Sequence[Tuple[str, Dict[str, float]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("image," + ",".join(METRIC_COLUMNS) + "\n")
        for name, record in rows:
            cells = ",".join(f"{record[col]:.6f}" for col in METRIC_COLUMNS)
            fh.write(f"{name},{cells}\n")


def tile_starts(extent: int, patch: int, stride: int) -> List[int]:
    """Window origins covering [0, extent): regular stride plus one final
    window aligned to the far edge when the stride does not land there."""
    if extent < patch:
        raise ShapeError(f"extent {extent} smaller than patch {patch}")
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def predict_probability_map(net: Network, image: np.ndarray, patch: int = 64,
                            stride: int = 32) -> np.ndarray:
    """Foreground probability for one (h,w,c) uint8 image, averaging the
    per-tile probabilities where tiles overlap."""
    if image.ndim != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (h,w,c) uint8 image, got {image.dtype} {image.shape}")
    if net.spec.classes != 2:
        raise ValueError("probability maps are defined for two-class networks")
    h, w = image.shape[:2]
    rows = tile_starts(h, patch, stride)
    cols = tile_starts(w, patch, stride)
    tiles = np.stack([image[r:r + patch, c:c + patch]
                      for r in rows for c in cols])
    x = normalize_input(tiles)
    logits = net(x, training=False)
    probs = ops.softmax_channel(logits).data[:, 1]
    accum = np.zeros((h, w))
    weight = np.zeros((h, w))
    k = 0
    for r in rows:
        for c in cols:
            accum[r:r + patch, c:c + patch] += probs[k]
            weight[r:r + patch, c:c + patch] += 1.0
            k += 1
    return accum / weight


def evaluate_image(net: Network, image: np.ndarray, gt: np.ndarray,
                   threshold: float = 0.5, fov: Optional[np.ndarray] = None,
                   patch: int = 64, stride: int = 32) -> Dict[str, float]:
    prob = predict_probability_map(net, image, patch, stride)
    return metric_record(prob, gt, threshold, fov)
