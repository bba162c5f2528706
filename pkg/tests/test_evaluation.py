"""Metric semantics, with a brute-force evaluator as the mAP oracle."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from enjoint import evaluation as ev
from enjoint import losses as L
from enjoint.model import Detection

# ---------------------------------------------------------------------------
# brute-force reference evaluator (kept deliberately naive)


def ap_ref(dets, gts_per_image, n_gt, iou_thr):
    """dets: [(image, box, conf)] any order; greedy match; trapezoid-free AP."""
    dets = sorted(dets, key=lambda t: (-t[2], t[0]))
    used = {img: [False] * len(boxes) for img, boxes in gts_per_image.items()}
    flags = []
    for img, box, _ in dets:
        best, best_gi = 0.0, -1
        for gi, gt in enumerate(gts_per_image.get(img, [])):
            if used[img][gi]:
                continue
            ov = ev.iou(box, gt)
            if ov >= iou_thr and ov > best:
                best, best_gi = ov, gi
        if best_gi >= 0:
            used[img][best_gi] = True
            flags.append(True)
        else:
            flags.append(False)
    if n_gt == 0 or not flags:
        return 0.0
    # walk every prefix, build PR points, integrate the envelope
    points = []
    tp = fp = 0
    for f in flags:
        tp += int(f)
        fp += int(not f)
        points.append((tp / n_gt, tp / (tp + fp)))
    area = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        if r > prev_r:
            p_env = max(p for rr, p in points if rr >= r)
            area += (r - prev_r) * p_env
            prev_r = r
    return area


def evaluate_map_ref(dets_per_image, gts_per_image, class_count, thresholds):
    per_class_50 = {}
    per_class_all = {}
    for cls in range(class_count):
        dets = []
        gts = {}
        n_gt = 0
        for img, image_dets in enumerate(dets_per_image):
            for d in image_dets:
                if d.class_id == cls:
                    dets.append((img, d.box, d.confidence))
        for img, (boxes, classes) in enumerate(gts_per_image):
            sel = [tuple(b) for b, c in zip(boxes, classes) if c == cls]
            if sel:
                gts[img] = sel
                n_gt += len(sel)
        if n_gt == 0 and not dets:
            continue
        per_class_50[cls] = ap_ref(dets, gts, n_gt, 0.5)
        per_class_all[cls] = [ap_ref(dets, gts, n_gt, t) for t in thresholds]
    if not per_class_50:
        return 0.0, 0.0
    map50 = float(np.mean(list(per_class_50.values())))
    map5095 = float(np.mean([np.mean(v) for v in per_class_all.values()]))
    return map50, map5095


# ---------------------------------------------------------------------------
# iou


def test_iou_identity():
    assert ev.iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0


def test_iou_disjoint():
    assert ev.iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0


def test_iou_analytic_third():
    assert ev.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_iou_rejects_zero_area():
    with pytest.raises(ValueError):
        ev.iou((0, 0, 0, 2), (0, 0, 1, 1))


# ---------------------------------------------------------------------------
# average precision


def det(box, cls, conf):
    return Detection(box=tuple(map(float, box)), class_id=cls, confidence=conf)


def test_ap_perfect_detector():
    gts = np.array([[0, 0, 10, 10], [20, 20, 30, 30]], dtype=float)
    classes = np.array([0, 1])
    dets = [det(gts[0], 0, 0.9), det(gts[1], 1, 0.8)]
    assert ev.average_precision(dets, gts, classes, 0.5) == 1.0


def test_ap_no_detections():
    gts = np.array([[0, 0, 10, 10]], dtype=float)
    assert ev.average_precision([], gts, np.array([0]), 0.5) == 0.0


def test_ap_hand_enumerated_half():
    # 1 GT; high-confidence FP then a perfect TP -> PR (0,0), (0.5,1) -> AP 0.5
    gts = np.array([[0, 0, 10, 10]], dtype=float)
    classes = np.array([0])
    dets = [det((50, 50, 60, 60), 0, 0.9), det((0, 0, 10, 10), 0, 0.8)]
    assert ev.average_precision(dets, gts, classes, 0.5) == pytest.approx(0.5)


def rand_instance(rng, n_images=3, max_boxes=10, class_count=3):
    gts = []
    dets = []
    for _ in range(n_images):
        n = int(rng.integers(0, max_boxes + 1))
        xy = rng.uniform(0, 50, size=(n, 2))
        wh = rng.uniform(2, 20, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        classes = rng.integers(0, class_count, size=n)
        gts.append((boxes, classes))
        m = int(rng.integers(0, max_boxes + 1))
        dxy = rng.uniform(0, 50, size=(m, 2))
        dwh = rng.uniform(2, 20, size=(m, 2))
        image_dets = [
            det(
                (dxy[i, 0], dxy[i, 1], dxy[i, 0] + dwh[i, 0], dxy[i, 1] + dwh[i, 1]),
                int(rng.integers(0, class_count)),
                float(rng.uniform(0.05, 1.0)),
            )
            for i in range(m)
        ]
        # sprinkle in some near-GT detections so TPs actually occur
        for b, c in zip(boxes[: n // 2], classes[: n // 2]):
            jitter = rng.uniform(-1.5, 1.5, size=4)
            bb = b + jitter
            if bb[2] - bb[0] > 1 and bb[3] - bb[1] > 1:
                image_dets.append(det(bb, int(c), float(rng.uniform(0.05, 1.0))))
        dets.append(image_dets)
    return dets, gts


def test_evaluate_map_matches_bruteforce(rng):
    for _ in range(50):
        dets, gts = rand_instance(rng)
        res = ev.evaluate_map(dets, gts, class_count=3)
        ref50, ref5095 = evaluate_map_ref(dets, gts, 3, ev.MAP5095_THRESHOLDS)
        assert res.map50 == pytest.approx(ref50, abs=1e-9)
        assert res.map5095 == pytest.approx(ref5095, abs=1e-9)


def test_evaluate_map_perfect_and_background(rng):
    gts = []
    dets = []
    for _ in range(8):
        boxes = np.array([[5.0, 5.0, 20.0, 20.0], [30.0, 30.0, 44.0, 40.0]])
        classes = np.array([0, 2])
        gts.append((boxes, classes))
        dets.append([det(b, int(c), 0.9) for b, c in zip(boxes, classes)])
    res = ev.evaluate_map(dets, gts, class_count=4)
    assert res.map50 == 1.0
    assert res.map5095 == 1.0
    assert 1 in res.excluded_classes and 3 in res.excluded_classes
    res_bg = ev.evaluate_map([[] for _ in gts], gts, class_count=4)
    assert res_bg.map50 == 0.0


def test_ap_monotone_in_added_tp(rng):
    # a detection for a GT that no existing detection can claim is a pure new
    # TP: it steals nothing from the greedy matcher, so AP must not drop
    checked = 0
    for _ in range(40):
        dets, gts = rand_instance(rng, n_images=2, max_boxes=5)
        base = ev.evaluate_map(dets, gts, class_count=3).map50
        placed = False
        for img, (boxes, classes) in enumerate(gts):
            for b, c in zip(boxes, classes):
                covered = any(
                    d.class_id == c and ev.iou(d.box, b) >= 0.5 for d in dets[img]
                )
                if not covered:
                    dets2 = [list(d) for d in dets]
                    dets2[img] = dets2[img] + [det(b, int(c), 1.0)]
                    better = ev.evaluate_map(dets2, gts, class_count=3).map50
                    assert better >= base - 1e-12
                    placed = True
                    checked += 1
                    break
            if placed:
                break
    assert checked >= 10


@settings(deadline=None, max_examples=25)
@given(scale=st.floats(1e-6, 1e6), seed=st.integers(0, 2**31 - 1))
def test_ap_confidence_rescale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    dets, gts = rand_instance(rng)
    base = ev.evaluate_map(dets, gts, class_count=3)
    scaled = [
        [det(d.box, d.class_id, d.confidence * scale) for d in image] for image in dets
    ]
    res = ev.evaluate_map(scaled, gts, class_count=3)
    assert res.map50 == base.map50
    assert res.map5095 == base.map5095


# ---------------------------------------------------------------------------
# psnr / gray world


def test_psnr_identical_capped():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert ev.psnr(img, img.copy()) == 99.0


def test_psnr_analytic_20db():
    a = np.zeros((10, 10, 3))
    b = np.full((10, 10, 3), 0.1)
    assert ev.psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_naive_mse(rng):
    a = rng.random((6, 7, 3))
    b = rng.random((6, 7, 3))
    mse = 0.0
    for i in range(6):
        for j in range(7):
            for c in range(3):
                mse += (a[i, j, c] - b[i, j, c]) ** 2
    mse /= 6 * 7 * 3
    assert ev.psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_gray_world_deviation_bitwise_equals_loss(rng):
    for _ in range(100):
        img = rng.random((5, 6, 3)).astype(np.float32)
        metric = ev.gray_world_deviation(img)
        t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))
        assert metric == float(L.gray_world_loss(t))


def test_gray_world_deviation_cases():
    assert ev.gray_world_deviation(np.full((4, 4, 3), 0.5, dtype=np.float32)) == 0.0
    img = np.empty((4, 4, 3), dtype=np.float32)
    img[..., 0] = 0.2
    img[..., 1] = 0.5
    img[..., 2] = 0.8
    assert ev.gray_world_deviation(img) == pytest.approx(0.06, abs=1e-7)
