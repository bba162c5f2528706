"""Training objectives.

Five terms drive the staged schedule: supervised L1 enhancement, detection loss
on raw labeled images, an unsupervised gray-world loss on enhanced unpaired
images, the same detection loss on enhanced images, and an embedding-alignment
loss (mean-squared error plus squared Frobenius distance of feature
covariances). The alignment loss stops gradient at the enhanced-image
embeddings: only the raw-image path is adjusted.

Detection loss composition (unit weights):

* class term  - binary cross-entropy on class logits, mean over positive
  anchor-cells x classes;
* box term    - mean(1 - CIoU) over positives;
* objectness  - binary cross-entropy over every anchor-cell of every scale,
  with target clamp(CIoU, 0) at positives and 0 elsewhere.

Positives come from a deterministic center-cell assignment: at each detection
stride, anchors whose max side ratio against the ground-truth box is below 4.0
are positive at the box's center cell. When two boxes claim the same
(cell, anchor) slot the one with the smaller side ratio wins (ties broken on
box coordinates then class), which keeps the loss invariant to ground-truth
ordering. Everything here is differentiable end to end; the only stop-gradient
in the system is the enhanced-embedding freeze in :func:`da_loss`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import tensorcore as tc
from .model import NetworkConfig

RATIO_GATE = 4.0
_EPS = 1e-9


@dataclass
class LossReport:
    """Per-step loss values; components absent for the current stage stay None."""

    enh: float | None = None
    det_r: float | None = None
    uns: float | None = None
    det_e: float | None = None
    da: float | None = None
    total: float = 0.0

    def present(self) -> dict[str, float]:
        return {
            k: v
            for k, v in vars(self).items()
            if k != "total" and v is not None
        }


def enh_loss(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(ref.shape)}")
    return (pred - ref).abs().mean()


def gray_world_loss(pred: torch.Tensor) -> torch.Tensor:
    """Squared deviation of per-channel means from mid gray, averaged over channels.

    For a batch, the loss is computed per image and then averaged.
    """
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
    if pred.dim() != 4 or pred.shape[1] != 3:
        raise ValueError(f"expected [B,3,H,W] or [3,H,W], got {tuple(pred.shape)}")
    channel_means = pred.mean(dim=(2, 3))  # [B, 3]
    return ((channel_means - 0.5) ** 2).mean(dim=1).mean()


def ciou(a: torch.Tensor, b: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Complete IoU of xyxy boxes (symmetric); broadcasts over leading dims.

    CIoU = IoU - center_dist^2 / enclosing_diag^2 - alpha * v with the standard
    aspect term v = (4/pi^2)(atan(w_a/h_a) - atan(w_b/h_b))^2 and
    alpha = v / (1 - IoU + v). Left differentiable throughout (alpha is not
    detached) so finite-difference checks apply to the exact trained function.
    """
    a = torch.as_tensor(a, dtype=torch.float64 if not torch.is_tensor(a) else None)
    b = torch.as_tensor(b, dtype=torch.float64 if not torch.is_tensor(b) else None)
    aw = a[..., 2] - a[..., 0]
    ah = a[..., 3] - a[..., 1]
    bw = b[..., 2] - b[..., 0]
    bh = b[..., 3] - b[..., 1]
    if validate and (
        (aw <= 0).any() or (ah <= 0).any() or (bw <= 0).any() or (bh <= 0).any()
    ):
        raise ValueError("degenerate zero-area box")
    ix = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    iy = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    iou = inter / (union + _EPS)
    acx = (a[..., 0] + a[..., 2]) / 2
    acy = (a[..., 1] + a[..., 3]) / 2
    bcx = (b[..., 0] + b[..., 2]) / 2
    bcy = (b[..., 1] + b[..., 3]) / 2
    rho2 = (acx - bcx) ** 2 + (acy - bcy) ** 2
    ex = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    ey = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    c2 = ex**2 + ey**2 + _EPS
    v = (4.0 / math.pi**2) * (torch.atan(aw / ah) - torch.atan(bw / bh)) ** 2
    alpha = v / (1.0 - iou + v + _EPS)
    return iou - rho2 / c2 - alpha * v


@dataclass
class AssignedTargets:
    """Sparse positive slots per detection scale.

    Each entry is ``(cell_y, cell_x, anchor_idx, gt_idx)``; target boxes and
    class ids follow from ``gt_idx``. ``unmatched`` counts ground-truth boxes
    that ended up with zero positive slots across all scales.
    """

    per_scale: list[list[tuple[int, int, int, int]]]
    unmatched: int


def assign_targets(
    boxes: np.ndarray, classes: np.ndarray, config: NetworkConfig
) -> AssignedTargets:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    per_scale: list[list[tuple[int, int, int, int]]] = []
    matched = np.zeros(len(boxes), dtype=bool)
    for stride, anchors in zip(config.det_strides, config.anchors):
        cells = config.input_size // stride
        claims: dict[tuple[int, int, int], tuple] = {}
        for gi, (box, cls) in enumerate(zip(boxes, classes)):
            w = box[2] - box[0]
            h = box[3] - box[1]
            cx = (box[0] + box[2]) / 2
            cy = (box[1] + box[3]) / 2
            gx = min(int(cx // stride), cells - 1)
            gy = min(int(cy // stride), cells - 1)
            for ai, (aw, ah) in enumerate(anchors):
                ratio = max(w / aw, aw / w, h / ah, ah / h)
                if ratio >= RATIO_GATE:
                    continue
                key = (gy, gx, ai)
                prio = (ratio, box[0], box[1], box[2], box[3], int(cls), gi)
                if key not in claims or prio < claims[key]:
                    claims[key] = prio
        entries = sorted((key, prio[-1]) for key, prio in claims.items())
        scale_list = [(gy, gx, ai, gi) for (gy, gx, ai), gi in entries]
        for _, _, _, gi in scale_list:
            matched[gi] = True
        per_scale.append(scale_list)
    return AssignedTargets(per_scale=per_scale, unmatched=int((~matched).sum()))


def _decode_pred_boxes(vals: torch.Tensor, gx, gy, anchor_wh, stride: int) -> torch.Tensor:
    """Differentiable decode of gathered (tx,ty,tw,th) logits into xyxy boxes."""
    sig = torch.sigmoid(vals)
    cx = (gx + 2.0 * sig[:, 0] - 0.5) * stride
    cy = (gy + 2.0 * sig[:, 1] - 0.5) * stride
    w = anchor_wh[:, 0] * (2.0 * sig[:, 2]) ** 2
    h = anchor_wh[:, 1] * (2.0 * sig[:, 3]) ** 2
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def det_loss(
    grids: list[torch.Tensor],
    gt_batch: list[tuple[np.ndarray, np.ndarray]],
    config: NetworkConfig,
) -> tuple[torch.Tensor, dict]:
    """Detection loss over a batch of raw grids; returns (total, components).

    ``gt_batch`` holds one (boxes, classes) pair per image. Components are
    python floats plus positive/unmatched counters; the total keeps the graph.
    """
    k = config.class_count
    a_per = config.anchors_per_cell
    block = 5 + k
    dtype = grids[0].dtype
    if grids[0].dim() == 3:
        grids = [g.unsqueeze(0) for g in grids]
    batch = grids[0].shape[0]
    if len(gt_batch) != batch:
        raise ValueError(f"{len(gt_batch)} label sets for batch of {batch}")

    assignments = [assign_targets(b, c, config) for b, c in gt_batch]
    unmatched = sum(asn.unmatched for asn in assignments)

    zero = torch.zeros((), dtype=dtype)
    cls_sum = zero.clone()
    box_sum = zero.clone()
    obj_sum = zero.clone()
    positives = 0
    total_cells = 0

    for si, (grid, anchors, stride) in enumerate(
        zip(grids, config.anchors, config.det_strides)
    ):
        b_sz, ch, hs, ws = grid.shape
        g = grid.view(b_sz, a_per, block, hs, ws)
        obj_logits = g[:, :, 4]
        total_cells += b_sz * a_per * hs * ws

        idx_b, idx_a, idx_y, idx_x = [], [], [], []
        tgt_boxes, tgt_cls = [], []
        for bi, asn in enumerate(assignments):
            boxes_np = np.asarray(gt_batch[bi][0], dtype=np.float64).reshape(-1, 4)
            cls_np = np.asarray(gt_batch[bi][1], dtype=np.int64).reshape(-1)
            for gy, gx, ai, gi in asn.per_scale[si]:
                idx_b.append(bi)
                idx_a.append(ai)
                idx_y.append(gy)
                idx_x.append(gx)
                tgt_boxes.append(boxes_np[gi])
                tgt_cls.append(cls_np[gi])

        obj_targets = torch.zeros((b_sz, a_per, hs, ws), dtype=dtype)
        if idx_b:
            ib = torch.tensor(idx_b)
            ia = torch.tensor(idx_a)
            iy = torch.tensor(idx_y)
            ix = torch.tensor(idx_x)
            vals = g[ib, ia, :4, iy, ix]
            anchor_wh = torch.tensor(
                [config.anchors[si][i] for i in idx_a], dtype=dtype
            )
            pred = _decode_pred_boxes(vals, ix.to(dtype), iy.to(dtype), anchor_wh, stride)
            tgt = torch.tensor(np.array(tgt_boxes), dtype=dtype)
            iou_term = ciou(pred, tgt, validate=False)
            box_sum = box_sum + (1.0 - iou_term).sum()
            positives += len(idx_b)

            cls_logits = g[ib, ia, 5:, iy, ix]
            onehot = torch.zeros((len(idx_b), k), dtype=dtype)
            onehot[torch.arange(len(idx_b)), torch.tensor(tgt_cls)] = 1.0
            cls_sum = cls_sum + F.binary_cross_entropy_with_logits(
                cls_logits, onehot, reduction="sum"
            )
            obj_targets = obj_targets.index_put((ib, ia, iy, ix), iou_term.clamp(min=0.0))
        obj_sum = obj_sum + F.binary_cross_entropy_with_logits(
            obj_logits, obj_targets, reduction="sum"
        )

    cls_term = cls_sum / max(positives * k, 1)
    box_term = box_sum / max(positives, 1)
    obj_term = obj_sum / total_cells
    total = cls_term + box_term + obj_term
    components = {
        "cls": float(cls_term.detach()),
        "box": float(box_term.detach()),
        "obj": float(obj_term.detach()),
        "positives": positives,
        "unmatched": unmatched,
    }
    return total, components


def da_loss(e_real: torch.Tensor, e_enh: torch.Tensor) -> torch.Tensor:
    """Embedding alignment: row-paired MSE plus squared Frobenius covariance gap.

    The enhanced embeddings are frozen (treated as constants): gradient flows
    only into ``e_real``.
    """
    if e_real.shape != e_enh.shape:
        raise ValueError(
            f"embedding shape mismatch: {tuple(e_real.shape)} vs {tuple(e_enh.shape)}"
        )
    if e_real.dim() != 2 or e_real.shape[0] < 2:
        raise ValueError("need paired n x d embedding sets with n >= 2")
    frozen = e_enh.detach()
    mse = ((e_real - frozen) ** 2).mean()
    cov_gap = ((tc.covariance(e_real) - tc.covariance(frozen)) ** 2).sum()
    return mse + cov_gap
