"""Three-stage training loop.

Stages accumulate losses: Burn-In trains supervised enhancement and detection
({enh, det_r}); Mutual-Learning adds the unsupervised gray-world loss on
enhanced unpaired images and the detection loss on those enhanced images
({uns, det_e}), with the enhanced labeled batch formed on the fly from current
enhancement weights; Domain-Adaptation adds the embedding-alignment loss {da}.
The learning rate decays by ``lr_decay`` when each later stage begins.

Determinism contract: batch composition and every augmentation draw depend only
on (train seed, step index), never on wall-clock or generation order, so two
runs with identical seeds produce bit-identical checkpoints and a run resumed
from any stage checkpoint reproduces the straight run exactly.
"""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensorcore as tc
from .aquasynth import (
    DatasetBundle,
    LabeledSample,
    PairedSample,
    gaussian_blur,
    resize_bilinear,
    sample_seed,
    splitmix64,
)
from .losses import LossReport, da_loss, det_loss, enh_loss, gray_world_loss
from .model import (
    NetworkConfig,
    NetworkWeights,
    backbone_forward,
    det_forward,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    uie_forward,
)


class Stage(enum.Enum):
    BURN_IN = "burn_in"
    MUTUAL_LEARNING = "mutual_learning"
    DOMAIN_ADAPTATION = "domain_adaptation"


LOSS_NAMES = ("enh", "det_r", "uns", "det_e", "da")

_STAGE_LOSSES = {
    Stage.BURN_IN: frozenset({"enh", "det_r"}),
    Stage.MUTUAL_LEARNING: frozenset({"enh", "det_r", "uns", "det_e"}),
    Stage.DOMAIN_ADAPTATION: frozenset({"enh", "det_r", "uns", "det_e", "da"}),
}


@dataclass(frozen=True)
class StageSchedule:
    burnin_steps: int  # steps before Mutual-Learning begins
    mutual_steps: int  # steps before Domain-Adaptation begins
    total_steps: int

    def __post_init__(self):
        # mutual_steps == total_steps is allowed: it yields an empty
        # Domain-Adaptation stage (the no-DA control configuration).
        if not 0 < self.burnin_steps < self.mutual_steps <= self.total_steps:
            raise ValueError(
                f"need 0 < burnin < mutual <= total, got "
                f"{self.burnin_steps}/{self.mutual_steps}/{self.total_steps}"
            )


def stage_of(step: int, schedule: StageSchedule) -> Stage:
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    if step < schedule.burnin_steps:
        return Stage.BURN_IN
    if step < schedule.mutual_steps:
        return Stage.MUTUAL_LEARNING
    return Stage.DOMAIN_ADAPTATION


def active_losses(step: int, schedule: StageSchedule) -> frozenset[str]:
    """Loss names computed at this step; stages accumulate earlier terms."""
    return _STAGE_LOSSES[stage_of(step, schedule)]


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    crop_min_side: float = 0.9  # per-side crop fraction; area >= 0.81
    color_jitter: float = 0.2
    blur_prob: float = 0.3
    blur_sigma: tuple[float, float] = (0.4, 1.2)


@dataclass(frozen=True)
class TrainConfig:
    schedule: StageSchedule = field(
        default_factory=lambda: StageSchedule(1500, 2400, 3000)
    )
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    det_batch: int = 16
    enh_batch: int = 8
    seed: int = 0
    checkpoint_every: int = 500
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: dict | None = None  # optional per-term weights, default 1.0

    def __post_init__(self):
        if self.det_batch < 1 or self.enh_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def weight_of(self, name: str) -> float:
        return float((self.loss_weights or {}).get(name, 1.0))


def lr_at(step: int, config: TrainConfig) -> float:
    sched = config.schedule
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    if step < sched.burnin_steps:
        return config.base_lr
    if step < sched.mutual_steps:
        return config.base_lr * config.lr_decay
    return config.base_lr * config.lr_decay**2


# ---------------------------------------------------------------------------
# augmentation


def flip_horizontal(image: np.ndarray, boxes: np.ndarray | None = None):
    w = image.shape[1]
    out = np.ascontiguousarray(image[:, ::-1])
    if boxes is None:
        return out, None
    if len(boxes):
        boxes = np.stack(
            [w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], axis=1
        )
    return out, boxes


def _crop_and_resize(image, boxes, x0, y0, cw, ch):
    h, w = image.shape[:2]
    cropped = image[y0 : y0 + ch, x0 : x0 + cw]
    out = resize_bilinear(cropped, h, w)
    if boxes is None:
        return out, None
    sx = w / cw
    sy = h / ch
    if len(boxes):
        boxes = boxes.astype(np.float32).copy()
        boxes[:, [0, 2]] = (boxes[:, [0, 2]] - x0) * sx
        boxes[:, [1, 3]] = (boxes[:, [1, 3]] - y0) * sy
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    return out, boxes


def _keep_mask(boxes: np.ndarray, min_side: float = 2.0) -> np.ndarray:
    if not len(boxes):
        return np.zeros(0, dtype=bool)
    return (boxes[:, 2] - boxes[:, 0] >= min_side) & (boxes[:, 3] - boxes[:, 1] >= min_side)


def weak_augment(sample, seed: int, aug: AugmentConfig = AugmentConfig()):
    """Horizontal flip + mild crop/resize; boxes are remapped and clipped.

    Accepts a LabeledSample, a PairedSample (same geometry on both halves) or a
    bare image. A crop that would drop every box of a labeled sample is
    resampled up to 10 times, then skipped.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if isinstance(sample, PairedSample):
        degraded, clear = sample.degraded, sample.clear
        if rng.random() < aug.hflip_prob:
            degraded, _ = flip_horizontal(degraded)
            clear, _ = flip_horizontal(clear)
        h, w = degraded.shape[:2]
        cw = max(4, round(w * rng.uniform(aug.crop_min_side, 1.0)))
        ch = max(4, round(h * rng.uniform(aug.crop_min_side, 1.0)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        degraded, _ = _crop_and_resize(degraded, None, x0, y0, cw, ch)
        clear, _ = _crop_and_resize(clear, None, x0, y0, cw, ch)
        return PairedSample(degraded, clear)

    if isinstance(sample, LabeledSample):
        image, boxes, classes = sample.image, sample.boxes, sample.classes
    else:
        image, boxes, classes = sample, None, None

    if rng.random() < aug.hflip_prob:
        image, boxes = flip_horizontal(image, boxes)
    h, w = image.shape[:2]
    had_boxes = boxes is not None and len(boxes) > 0
    for _ in range(10):
        cw = max(4, round(w * rng.uniform(aug.crop_min_side, 1.0)))
        ch = max(4, round(h * rng.uniform(aug.crop_min_side, 1.0)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        new_img, new_boxes = _crop_and_resize(image, boxes, x0, y0, cw, ch)
        if boxes is None:
            return new_img
        keep = _keep_mask(new_boxes)
        if had_boxes and not keep.any():
            continue
        return LabeledSample(new_img, new_boxes[keep], classes[keep])
    if boxes is None:
        return image
    return LabeledSample(image.copy(), boxes.copy(), classes.copy())


def _color_jitter(image: np.ndarray, rng, amount: float) -> np.ndarray:
    brightness = 1.0 + rng.uniform(-amount, amount)
    saturation = 1.0 + rng.uniform(-amount, amount)
    out = image * brightness
    gray = out.mean(axis=2, keepdims=True)
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def strong_augment(
    samples: list[LabeledSample],
    seed: int,
    aug: AugmentConfig = AugmentConfig(),
    center: tuple[int, int] | None = None,
) -> LabeledSample:
    """Mosaic of four samples, then color jitter, optional blur, flip and crop.

    All source samples must share one size; mosaic boxes that get clipped away
    stay dropped (an empty label set is a valid negative sample). ``center``
    overrides the random mosaic split point.
    """
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly 4 samples")
    h, w = samples[0].image.shape[:2]
    for s in samples[1:]:
        if s.image.shape[:2] != (h, w):
            raise ValueError("mosaic samples must share one size")
    rng = np.random.Generator(np.random.PCG64(seed))
    if center is None:
        cx = int(round(w * rng.uniform(0.25, 0.75)))
        cy = int(round(h * rng.uniform(0.25, 0.75)))
    else:
        cx, cy = center
    canvas = np.zeros((h, w, 3), dtype=np.float32)
    quads = [
        (0, 0, cx, cy),
        (cx, 0, w - cx, cy),
        (0, cy, cx, h - cy),
        (cx, cy, w - cx, h - cy),
    ]
    all_boxes = []
    all_classes = []
    for s, (qx, qy, qw, qh) in zip(samples, quads):
        canvas[qy : qy + qh, qx : qx + qw] = resize_bilinear(s.image, qh, qw)
        if len(s.boxes):
            b = s.boxes.astype(np.float32).copy()
            b[:, [0, 2]] = b[:, [0, 2]] * (qw / w) + qx
            b[:, [1, 3]] = b[:, [1, 3]] * (qh / h) + qy
            all_boxes.append(b)
            all_classes.append(s.classes)
    boxes = (
        np.concatenate(all_boxes, axis=0)
        if all_boxes
        else np.zeros((0, 4), dtype=np.float32)
    )
    classes = (
        np.concatenate(all_classes, axis=0)
        if all_classes
        else np.zeros((0,), dtype=np.int64)
    )
    keep = _keep_mask(boxes)
    boxes, classes = boxes[keep], classes[keep]

    image = _color_jitter(canvas, rng, aug.color_jitter)
    if rng.random() < aug.blur_prob:
        image = gaussian_blur(image, float(rng.uniform(*aug.blur_sigma)))
    if rng.random() < aug.hflip_prob:
        image, boxes = flip_horizontal(image, boxes)
    cw = max(4, round(w * rng.uniform(aug.crop_min_side, 1.0)))
    ch = max(4, round(h * rng.uniform(aug.crop_min_side, 1.0)))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    image, boxes = _crop_and_resize(image, boxes, x0, y0, cw, ch)
    keep = _keep_mask(boxes)
    return LabeledSample(image, boxes[keep], classes[keep])


# ---------------------------------------------------------------------------
# batching

_INIT_SALT = 0x494E4954
_BATCH_SALT = 0x42415443


@dataclass
class Batches:
    enh_degraded: torch.Tensor | None = None
    enh_clear: torch.Tensor | None = None
    det_images: torch.Tensor | None = None
    det_gts: list | None = None
    ur_images: torch.Tensor | None = None
    ur_gts: list | None = None


def _to_chw_batch(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack([img.transpose(2, 0, 1) for img in images]).astype(np.float32)
    return torch.from_numpy(arr)


def make_batches(
    bundle: DatasetBundle,
    step: int,
    config: TrainConfig,
    net_config: NetworkConfig,
) -> Batches:
    """Assemble exactly the batches required by active_losses(step)."""
    active = active_losses(step, config.schedule)
    rng = np.random.Generator(
        np.random.PCG64(sample_seed(splitmix64(config.seed ^ _BATCH_SALT), step))
    )
    aug = config.augment
    out = Batches()

    idx = rng.choice(len(bundle.pairs), size=min(config.enh_batch, len(bundle.pairs)), replace=False)
    seeds = rng.integers(0, 2**63, size=len(idx))
    pairs = [weak_augment(bundle.pairs[i], int(s), aug) for i, s in zip(idx, seeds)]
    out.enh_degraded = _to_chw_batch([p.degraded for p in pairs])
    out.enh_clear = _to_chw_batch([p.clear for p in pairs])

    det_samples = []
    for _ in range(config.det_batch):
        picks = rng.choice(len(bundle.labeled), size=4, replace=True)
        mosaic_seed = int(rng.integers(0, 2**63))
        det_samples.append(
            strong_augment([bundle.labeled[i] for i in picks], mosaic_seed, aug)
        )
    out.det_images = _to_chw_batch([s.image for s in det_samples])
    out.det_gts = [(s.boxes, s.classes) for s in det_samples]

    if "uns" in active:
        idx = rng.choice(
            len(bundle.labeled), size=min(config.enh_batch, len(bundle.labeled)), replace=False
        )
        seeds = rng.integers(0, 2**63, size=len(idx))
        ur_samples = [weak_augment(bundle.labeled[i], int(s), aug) for i, s in zip(idx, seeds)]
        out.ur_images = _to_chw_batch([s.image for s in ur_samples])
        out.ur_gts = [(s.boxes, s.classes) for s in ur_samples]
    return out


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainState:
    weights: NetworkWeights
    velocities: dict[str, torch.Tensor]
    net_config: NetworkConfig
    config: TrainConfig
    da_evaluations: int = 0  # instrumentation: burn-in isolation check
    unmatched_gts: int = 0  # data-quality counter: GTs no anchor accepted


def init_state(net_config: NetworkConfig, config: TrainConfig) -> TrainState:
    weights = init_weights(net_config, splitmix64(config.seed ^ _INIT_SALT))
    for p in weights.params.values():
        p.requires_grad_(True)
    velocities = {n: torch.zeros_like(p, requires_grad=False) for n, p in weights.params.items()}
    return TrainState(weights, velocities, net_config, config)


def train_step(state: TrainState, batches: Batches, step: int) -> LossReport:
    """One combined forward/backward over the stage's active losses + SGD update.

    Raises FloatingPointError on a non-finite total or gradient; the state is
    left untouched in that case.
    """
    config = state.config
    active = active_losses(step, config.schedule)
    if batches.enh_degraded is None or batches.det_images is None:
        raise ValueError("missing burn-in batches")
    if ("uns" in active) != (batches.ur_images is not None):
        raise ValueError("unpaired batch does not match the active loss set")

    weights = state.weights
    net = state.net_config
    for p in weights.params.values():
        p.grad = None

    report = LossReport()
    feats_s = backbone_forward(batches.enh_degraded, weights, net)
    enhanced_s = uie_forward(feats_s, weights, net)
    l_enh = enh_loss(enhanced_s, batches.enh_clear)
    report.enh = float(l_enh.detach())
    total = config.weight_of("enh") * l_enh

    feats_r = backbone_forward(batches.det_images, weights, net)
    l_det_r, det_comp = det_loss(det_forward(feats_r, weights, net), batches.det_gts, net)
    report.det_r = float(l_det_r.detach())
    state.unmatched_gts += det_comp["unmatched"]
    total = total + config.weight_of("det_r") * l_det_r

    if "uns" in active:
        feats_u = backbone_forward(batches.ur_images, weights, net)
        enhanced_u = uie_forward(feats_u, weights, net)
        l_uns = gray_world_loss(enhanced_u)
        report.uns = float(l_uns.detach())
        total = total + config.weight_of("uns") * l_uns

        feats_e = backbone_forward(enhanced_u, weights, net)
        l_det_e, _ = det_loss(det_forward(feats_e, weights, net), batches.ur_gts, net)
        report.det_e = float(l_det_e.detach())
        total = total + config.weight_of("det_e") * l_det_e

        if "da" in active:
            l_da = da_loss(feats_u.embedding, feats_e.embedding)
            state.da_evaluations += 1
            report.da = float(l_da.detach())
            total = total + config.weight_of("da") * l_da

    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite total loss at step {step}")
    total.backward()

    grads = {}
    for name, p in weights.params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name} at step {step}")
        grads[name] = g

    lr = lr_at(step, config)
    with torch.no_grad():
        for name, p in weights.params.items():
            new_p, new_v = tc.sgd_update(p, grads[name], state.velocities[name], lr, config.momentum)
            weights.params[name] = new_p.requires_grad_(True)
            state.velocities[name] = new_v
    weights.step = step + 1
    report.total = float(sum(report.present().values()))
    return report


@dataclass
class TrainResult:
    checkpoints: dict[str, str]  # name -> path
    hashes: dict[str, str]  # name -> sha256 of the checkpoint file
    log_path: str
    wall_clock_s: float


def run_training(
    bundle: DatasetBundle,
    net_config: NetworkConfig,
    config: TrainConfig,
    out_dir,
    resume_from: str | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Run (or resume) the schedule, writing stage checkpoints and the loss log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = config.schedule

    if resume_from:
        weights, ck_net, velocities = load_checkpoint(resume_from)
        if ck_net.to_dict() != net_config.to_dict():
            raise ValueError("checkpoint network config does not match")
        if not velocities:
            velocities = {n: torch.zeros_like(p) for n, p in weights.params.items()}
        for p in weights.params.values():
            p.requires_grad_(True)
        state = TrainState(weights, velocities, net_config, config)
    else:
        state = init_state(net_config, config)

    boundaries = {sched.burnin_steps: "burnin", sched.mutual_steps: "mutual"}
    checkpoints: dict[str, str] = {}
    hashes: dict[str, str] = {}

    def save(name: str) -> None:
        path = out_dir / f"checkpoint_{name}.ckpt"
        digest = save_checkpoint(path, state.weights, net_config, state.velocities)
        checkpoints[name] = str(path)
        hashes[name] = digest

    start_step = state.weights.step
    log_path = out_dir / "train_log.csv"
    t0 = time.perf_counter()
    last_stage = None
    with open(log_path, "w", newline="") as logf:
        writer = csv.writer(logf)
        writer.writerow(["step", "stage", "enh", "det_r", "uns", "det_e", "da", "total", "lr"])
        for step in range(start_step, sched.total_steps):
            if step in boundaries:
                save(boundaries[step])
            stage = stage_of(step, sched)
            if stage is not last_stage:
                print(f"[train] step {step}: entering {stage.value} (lr={lr_at(step, config):g})")
                if last_stage is not None and state.unmatched_gts:
                    print(
                        f"[train] data quality: {state.unmatched_gts} ground-truth boxes "
                        f"matched no anchor so far"
                    )
                last_stage = stage
            batches = make_batches(bundle, step, config, net_config)
            report = train_step(state, batches, step)
            fmt = lambda v: "" if v is None else f"{v:.6f}"
            writer.writerow(
                [
                    step,
                    stage.value,
                    fmt(report.enh),
                    fmt(report.det_r),
                    fmt(report.uns),
                    fmt(report.det_e),
                    fmt(report.da),
                    f"{report.total:.6f}",
                    f"{lr_at(step, config):g}",
                ]
            )
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save("latest")
            if progress_every and (step + 1) % progress_every == 0:
                print(f"[train] step {step + 1}/{sched.total_steps} total={report.total:.4f}")
    if sched.mutual_steps == sched.total_steps:
        save("mutual")
    save("final")
    return TrainResult(
        checkpoints=checkpoints,
        hashes=hashes,
        log_path=str(log_path),
        wall_clock_s=time.perf_counter() - t0,
    )
