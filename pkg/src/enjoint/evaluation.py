"""Detection and enhancement metrics.

Average precision uses greedy confidence-descending matching (best-IoU
tie-break, then lowest ground-truth index) and the all-point interpolated area
under the precision-recall curve. ``map50`` averages per-class AP at IoU 0.5;
``map5095`` additionally averages over thresholds 0.50:0.05:0.95. Classes with
neither ground truth nor detections are excluded from the means and reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .model import Detection

MAP5095_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a, b) -> float:
    """Intersection over union of two xyxy boxes."""
    a = tuple(map(float, a))
    b = tuple(map(float, b))
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError("zero-area box")
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _ap_from_curve(tp_flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP given TP flags in confidence-descending order."""
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, then area over recall increments
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            area += (r - prev_r) * p
            prev_r = r
    return float(area)


def _greedy_match(
    dets: list[tuple[int, tuple, float]],
    gts_by_image: dict[int, list[tuple]],
    iou_thr: float,
) -> np.ndarray:
    """TP flags for detections of one class.

    ``dets`` holds (image_id, box, confidence) and must already be sorted by
    descending confidence; ``gts_by_image`` maps image_id to its boxes.
    """
    used: dict[int, np.ndarray] = {
        img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts_by_image.items()
    }
    flags = np.zeros(len(dets), dtype=bool)
    for di, (img, box, _conf) in enumerate(dets):
        boxes = gts_by_image.get(img, [])
        best_iou = 0.0
        best_gi = -1
        for gi, gt_box in enumerate(boxes):
            if used[img][gi]:
                continue
            ov = iou(box, gt_box)
            if ov >= iou_thr and (ov > best_iou or (ov == best_iou and best_gi == -1)):
                best_iou = ov
                best_gi = gi
        if best_gi >= 0:
            used[img][best_gi] = True
            flags[di] = True
    return flags


def average_precision(
    dets: list[Detection],
    gt_boxes,
    gt_classes,
    iou_thr: float = 0.5,
) -> float:
    """Single-image, class-aware AP over all classes present in the ground truth."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    classes = sorted(set(gt_classes.tolist()) | {d.class_id for d in dets})
    aps = []
    for cls in classes:
        cls_dets = sorted(
            (
                (0, d.box, d.confidence)
                for d in dets
                if d.class_id == cls
            ),
            key=lambda t: -t[2],
        )
        cls_gts = {0: [tuple(b) for b, c in zip(gt_boxes, gt_classes) if c == cls]}
        n_gt = len(cls_gts[0])
        if n_gt == 0 and not cls_dets:
            continue
        flags = _greedy_match(cls_dets, cls_gts, iou_thr)
        aps.append(_ap_from_curve(flags, n_gt))
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class APResult:
    per_class_ap: dict[int, float]
    map50: float
    map5095: float
    counts: dict[int, dict[str, int]]
    excluded_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "per_class_ap50": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "excluded_classes": self.excluded_classes,
        }


def evaluate_map(
    detections: list[list[Detection]],
    ground_truths: list[tuple[np.ndarray, np.ndarray]],
    class_count: int,
    thresholds: tuple[float, ...] = MAP5095_THRESHOLDS,
) -> APResult:
    """Dataset-level mAP: pooled per-class matching across images."""
    if len(detections) != len(ground_truths):
        raise ValueError("detections/ground-truth image counts differ")
    per_class_dets: dict[int, list[tuple[int, tuple, float]]] = {}
    per_class_gts: dict[int, dict[int, list[tuple]]] = {}
    for img, (dets, (boxes, classes)) in enumerate(zip(detections, ground_truths)):
        for d in dets:
            per_class_dets.setdefault(d.class_id, []).append((img, d.box, d.confidence))
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        for box, cls in zip(boxes, classes):
            per_class_gts.setdefault(int(cls), {}).setdefault(img, []).append(tuple(box))

    per_class_ap: dict[int, float] = {}
    per_class_all: dict[int, list[float]] = {}
    counts: dict[int, dict[str, int]] = {}
    excluded: list[int] = []
    for cls in range(class_count):
        dets = sorted(per_class_dets.get(cls, []), key=lambda t: (-t[2], t[0]))
        gts = per_class_gts.get(cls, {})
        n_gt = sum(len(v) for v in gts.values())
        if n_gt == 0 and not dets:
            excluded.append(cls)
            continue
        aps = []
        for thr in thresholds:
            flags = _greedy_match(dets, gts, thr)
            aps.append(_ap_from_curve(flags, n_gt))
        flags50 = _greedy_match(dets, gts, 0.5)
        per_class_ap[cls] = _ap_from_curve(flags50, n_gt)
        per_class_all[cls] = aps
        counts[cls] = {
            "tp": int(flags50.sum()),
            "fp": int((~flags50).sum()),
            "unmatched": int(n_gt - flags50.sum()),
        }
    included = sorted(per_class_ap)
    map50 = float(np.mean([per_class_ap[c] for c in included])) if included else 0.0
    map5095 = (
        float(np.mean([np.mean(per_class_all[c]) for c in included])) if included else 0.0
    )
    return APResult(
        per_class_ap=per_class_ap,
        map50=map50,
        map5095=map5095,
        counts=counts,
        excluded_classes=excluded,
    )


PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0,1]; capped at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def gray_world_deviation(img: np.ndarray) -> float:
    """Metric twin of the unsupervised gray-world loss (same implementation)."""
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
    return float(losses.gray_world_loss(t))
