"""Shared-backbone dual-head network.

A small CSP-style backbone feeds two independent heads: an anchor-based
detection head on the two deepest stages and an enhancement decoder built from
1x1-dominant CSP blocks with bilinear x2 upsampling. There is no feature
exchange between heads; the backbone runs exactly once per forward regardless
of mode, so Dual-mode outputs are bit-identical to running the single modes.

The parameter registry is a flat name -> tensor dict whose names partition into
the prefixes ``backbone.``, ``det.`` and ``uie.``; mode-level parameter and
mult-add counts are derived analytically from the same layer plan used to
initialize the weights.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import tensorcore as tc


class Mode(enum.Enum):
    DETECT = "det"
    ENHANCE = "enh"
    DUAL = "dual"


DEFAULT_ANCHORS = (
    ((10.0, 10.0), (18.0, 14.0), (14.0, 22.0)),  # stride 8
    ((28.0, 28.0), (44.0, 32.0), (34.0, 52.0)),  # stride 16
)


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 96
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128)
    det_strides: tuple[int, ...] = (8, 16)
    anchors: tuple[tuple[tuple[float, float], ...], ...] = DEFAULT_ANCHORS
    class_count: int = 4
    uie_channels: tuple[int, ...] = (64, 32, 16, 8)

    def __post_init__(self):
        strides = self.stage_strides()
        if list(self.det_strides) != sorted(self.det_strides):
            raise ValueError("det_strides must be ascending")
        for s in self.det_strides:
            if s not in strides:
                raise ValueError(f"det stride {s} not produced by backbone stages {strides}")
        if len(self.anchors) != len(self.det_strides):
            raise ValueError("need one anchor set per detection stride")
        for per_stride in self.anchors:
            for w, h in per_stride:
                if w <= 0 or h <= 0:
                    raise ValueError("anchors must be positive")
        if self.input_size % strides[-1] != 0:
            raise ValueError(f"input_size must be divisible by {strides[-1]}")
        if 2 ** len(self.uie_channels) != self.det_strides[-1]:
            raise ValueError(
                "uie_channels must supply one stage per x2 upsample "
                f"(need log2({self.det_strides[-1]}) stages)"
            )
        for c in (self.stem_channels, *self.stage_channels, *self.uie_channels):
            if c < 2 or c % 2:
                raise ValueError(f"channel counts must be even and >= 2, got {c}")

    def stage_strides(self) -> tuple[int, ...]:
        return tuple(2 ** (i + 2) for i in range(len(self.stage_channels)))

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchors[0])

    @property
    def embedding_dim(self) -> int:
        return self.stage_channels[-1]

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
            "stage_channels": list(self.stage_channels),
            "det_strides": list(self.det_strides),
            "anchors": [[list(a) for a in per] for per in self.anchors],
            "class_count": self.class_count,
            "uie_channels": list(self.uie_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_size=d["input_size"],
            stem_channels=d["stem_channels"],
            stage_channels=tuple(d["stage_channels"]),
            det_strides=tuple(d["det_strides"]),
            anchors=tuple(tuple(tuple(a) for a in per) for per in d["anchors"]),
            class_count=d["class_count"],
            uie_channels=tuple(d["uie_channels"]),
        )


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int
    stride: int
    out_hw: int  # output spatial side length at config.input_size


def _csp_specs(prefix: str, c: int, hw: int) -> list[ConvSpec]:
    h = c // 2
    return [
        ConvSpec(f"{prefix}.b1", h, h, 1, 1, hw),
        ConvSpec(f"{prefix}.b2", h, h, 3, 1, hw),
        ConvSpec(f"{prefix}.b3", h, h, 1, 1, hw),
        ConvSpec(f"{prefix}.fuse", c, c, 1, 1, hw),
    ]


def layer_plan(config: NetworkConfig) -> list[ConvSpec]:
    """Every conv layer in forward order; init, counting and forward share it."""
    specs: list[ConvSpec] = []
    s = config.input_size
    hw = s // 2
    specs.append(ConvSpec("backbone.stem", 3, config.stem_channels, 3, 2, hw))
    cin = config.stem_channels
    for i, c in enumerate(config.stage_channels):
        hw //= 2
        specs.append(ConvSpec(f"backbone.s{i + 1}.down", cin, c, 3, 2, hw))
        specs.extend(_csp_specs(f"backbone.s{i + 1}.csp", c, hw))
        cin = c

    a = config.anchors_per_cell
    out_ch = a * (5 + config.class_count)
    strides = config.stage_strides()
    for stride in config.det_strides:
        c = config.stage_channels[strides.index(stride)]
        hw = config.input_size // stride
        specs.append(ConvSpec(f"det.p{stride}.c1", c, c, 1, 1, hw))
        specs.append(ConvSpec(f"det.p{stride}.c2", c, c, 3, 1, hw))
        specs.append(ConvSpec(f"det.p{stride}.out", c, out_ch, 1, 1, hw))

    deep_stride = config.det_strides[-1]
    skip_stride = deep_stride // 2
    skip_ch = config.stage_channels[strides.index(skip_stride)]
    hw = config.input_size // deep_stride
    cin = config.stage_channels[-1]
    for i, c in enumerate(config.uie_channels):
        specs.append(ConvSpec(f"uie.u{i + 1}.proj", cin, c, 1, 1, hw))
        hw *= 2
        if i == 0:
            specs.append(ConvSpec("uie.skip", skip_ch, c, 1, 1, hw))
        specs.extend(_csp_specs(f"uie.u{i + 1}.csp", c, hw))
        cin = c
    specs.append(ConvSpec("uie.out", cin, 3, 3, 1, hw))
    return specs


@dataclass
class NetworkWeights:
    params: dict[str, torch.Tensor]
    step: int = 0

    def validate(self) -> None:
        for name, p in self.params.items():
            root = name.split(".", 1)[0]
            if root not in ("backbone", "det", "uie"):
                raise ValueError(f"parameter {name!r} outside the three head prefixes")
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"parameter {name!r} has non-finite entries")

    def named_subset(self, prefixes: tuple[str, ...]) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith(prefixes)}

    def clone(self) -> "NetworkWeights":
        return NetworkWeights(
            {n: p.detach().clone() for n, p in self.params.items()}, self.step
        )


def init_weights(config: NetworkConfig, seed: int) -> NetworkWeights:
    """He-style init from a seeded numpy stream; detection objectness bias starts
    at -4 so early objectness targets are near the negative prior."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, torch.Tensor] = {}
    for spec in layer_plan(config):
        fan_in = spec.cin * spec.k * spec.k
        if spec.name.startswith("det.") and spec.name.endswith(".out"):
            w = rng.normal(0.0, 0.01, size=(spec.cout, spec.cin, spec.k, spec.k))
            b = np.zeros(spec.cout)
        else:
            std = (2.0 / fan_in) ** 0.5
            if spec.name == "uie.out":
                std = (1.0 / fan_in) ** 0.5
            w = rng.normal(0.0, std, size=(spec.cout, spec.cin, spec.k, spec.k))
            b = np.zeros(spec.cout)
        params[f"{spec.name}.w"] = torch.from_numpy(w.astype(np.float32))
        params[f"{spec.name}.b"] = torch.from_numpy(b.astype(np.float32))
    block = 5 + config.class_count
    for stride in config.det_strides:
        bias = params[f"det.p{stride}.out.b"]
        for anchor in range(config.anchors_per_cell):
            bias[anchor * block + 4] = -4.0
    return NetworkWeights(params)


# ---------------------------------------------------------------------------
# forward passes

call_counters = {"backbone": 0}


@dataclass
class BackboneFeatures:
    by_stride: dict[int, torch.Tensor]
    embedding: torch.Tensor  # [B, d] pooled deepest stage, rescaled to norm sqrt(d)


def _conv(x, weights, name, stride=1, act=True):
    w = weights.params[f"{name}.w"]
    y = tc.conv2d(x, w, weights.params[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)
    return tc.leaky_relu(y) if act else y


def _csp(x, weights, prefix):
    h = x.shape[1] // 2
    a, b = x[:, :h], x[:, h:]
    b = _conv(b, weights, f"{prefix}.b1")
    b = _conv(b, weights, f"{prefix}.b2")
    b = _conv(b, weights, f"{prefix}.b3")
    return _conv(torch.cat([a, b], dim=1), weights, f"{prefix}.fuse")


def _ensure_batched_image(x: torch.Tensor, config: NetworkConfig) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected image batch [B,3,H,W], got {tuple(x.shape)}")
    if x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise ValueError(
            f"image size {tuple(x.shape[2:])} does not match config input_size "
            f"{config.input_size}"
        )
    return x


def backbone_forward(
    image: torch.Tensor, weights: NetworkWeights, config: NetworkConfig
) -> BackboneFeatures:
    """Run the shared backbone.

    The embedding is the spatial mean of the deepest stage rescaled to norm
    sqrt(d) (unit RMS per dimension). The rescale pins the scale the
    covariance-alignment loss sees: without any normalization in the net,
    activation magnitudes grow freely during training and the quartic
    covariance term would otherwise dwarf every other loss and let the
    backbone satisfy alignment by collapsing its features.
    """
    x = _ensure_batched_image(image, config)
    dtype = weights.params["backbone.stem.w"].dtype
    x = x.to(dtype)
    call_counters["backbone"] += 1
    x = _conv(x, weights, "backbone.stem", stride=2)
    by_stride: dict[int, torch.Tensor] = {}
    for i, stride in enumerate(config.stage_strides()):
        x = _conv(x, weights, f"backbone.s{i + 1}.down", stride=2)
        x = _csp(x, weights, f"backbone.s{i + 1}.csp")
        by_stride[stride] = x
    pooled = tc.global_avg_pool(x)
    scale = pooled.shape[-1] ** 0.5 / (pooled.norm(dim=-1, keepdim=True) + 1e-12)
    return BackboneFeatures(by_stride=by_stride, embedding=pooled * scale)


def uie_forward(
    features: BackboneFeatures, weights: NetworkWeights, config: NetworkConfig
) -> torch.Tensor:
    """Enhancement decoder: 1x1-dominant CSP stages with bilinear x2 upsampling."""
    deep_stride = config.det_strides[-1]
    x = features.by_stride[deep_stride]
    for i in range(len(config.uie_channels)):
        x = _conv(x, weights, f"uie.u{i + 1}.proj")
        x = tc.bilinear_upsample(x, 2)
        if i == 0:
            skip = _conv(features.by_stride[deep_stride // 2], weights, "uie.skip")
            x = x + skip
        x = _csp(x, weights, f"uie.u{i + 1}.csp")
    return tc.sigmoid(_conv(x, weights, "uie.out", act=False))


def det_forward(
    features: BackboneFeatures, weights: NetworkWeights, config: NetworkConfig
) -> list[torch.Tensor]:
    """Raw per-stride grids of shape [B, A*(5+K), Hs, Ws]; logits, no activation."""
    grids = []
    for stride in config.det_strides:
        x = features.by_stride[stride]
        x = _conv(x, weights, f"det.p{stride}.c1")
        x = _conv(x, weights, f"det.p{stride}.c2")
        grids.append(_conv(x, weights, f"det.p{stride}.out", act=False))
    return grids


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    confidence: float


def decode_grid_boxes(grid: torch.Tensor, anchors, stride: int):
    """Decode one [A*(5+K), Hs, Ws] logit grid into per-anchor-cell box/conf arrays.

    Box center is ``(cell + 2*sigmoid(txy) - 0.5) * stride``; box size is
    ``anchor * (2*sigmoid(twh))**2``.
    """
    a = len(anchors)
    ch, hs, ws = grid.shape
    block = ch // a
    g = grid.detach().to(torch.float32).reshape(a, block, hs, ws).numpy()
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-g))
    gy, gx = np.mgrid[0:hs, 0:ws]
    anchors = np.asarray(anchors, dtype=np.float32)
    cx = (gx[None] + 2.0 * sig[:, 0] - 0.5) * stride
    cy = (gy[None] + 2.0 * sig[:, 1] - 0.5) * stride
    bw = anchors[:, 0, None, None] * (2.0 * sig[:, 2]) ** 2
    bh = anchors[:, 1, None, None] * (2.0 * sig[:, 3]) ** 2
    obj = sig[:, 4]
    cls_scores = sig[:, 5:]
    return cx, cy, bw, bh, obj, cls_scores


def decode_detections(
    grids: list[torch.Tensor],
    config: NetworkConfig,
    conf_thresh: float = 0.25,
    nms_iou: float = 0.45,
) -> list[Detection]:
    """Threshold, clamp to the image, and apply greedy per-class NMS (single image)."""
    if not 0.0 < conf_thresh < 1.0 or not 0.0 < nms_iou < 1.0:
        raise ValueError("thresholds must lie in (0,1)")
    size = float(config.input_size)
    cands: list[Detection] = []
    for grid, anchors, stride in zip(grids, config.anchors, config.det_strides):
        if grid.dim() == 4:
            if grid.shape[0] != 1:
                raise ValueError("decode_detections expects a single image")
            grid = grid[0]
        cx, cy, bw, bh, obj, cls_scores = decode_grid_boxes(grid, anchors, stride)
        best_cls = cls_scores.argmax(axis=1)
        best_score = cls_scores.max(axis=1)
        conf = obj * best_score
        sel = np.argwhere(conf >= conf_thresh)
        for a_idx, y, x in sel:
            w2 = bw[a_idx, y, x] / 2.0
            h2 = bh[a_idx, y, x] / 2.0
            x1 = float(np.clip(cx[a_idx, y, x] - w2, 0.0, size))
            y1 = float(np.clip(cy[a_idx, y, x] - h2, 0.0, size))
            x2 = float(np.clip(cx[a_idx, y, x] + w2, 0.0, size))
            y2 = float(np.clip(cy[a_idx, y, x] + h2, 0.0, size))
            if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
                continue
            cands.append(
                Detection(
                    box=(x1, y1, x2, y2),
                    class_id=int(best_cls[a_idx, y, x]),
                    confidence=float(conf[a_idx, y, x]),
                )
            )
    cands.sort(key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for cand in cands:
        suppressed = False
        for k in kept:
            if k.class_id == cand.class_id and _iou_xyxy(k.box, cand.box) > nms_iou:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept


def _iou_xyxy(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


@dataclass
class ForwardResult:
    detections: list[Detection] | None = None
    enhanced: torch.Tensor | None = None


def forward(
    image: torch.Tensor,
    weights: NetworkWeights,
    config: NetworkConfig,
    mode: Mode,
    conf_thresh: float = 0.25,
    nms_iou: float = 0.45,
) -> ForwardResult:
    """Single-image inference; the backbone runs exactly once in every mode."""
    with torch.no_grad():
        feats = backbone_forward(image, weights, config)
        out = ForwardResult()
        if mode in (Mode.DETECT, Mode.DUAL):
            grids = det_forward(feats, weights, config)
            out.detections = decode_detections(grids, config, conf_thresh, nms_iou)
        if mode in (Mode.ENHANCE, Mode.DUAL):
            out.enhanced = uie_forward(feats, weights, config)
    return out


# ---------------------------------------------------------------------------
# analytic accounting

_MODE_PREFIXES = {
    Mode.DETECT: ("backbone.", "det."),
    Mode.ENHANCE: ("backbone.", "uie."),
    Mode.DUAL: ("backbone.", "det.", "uie."),
}


def count_prefix_params_flops(
    config: NetworkConfig, prefixes: tuple[str, ...]
) -> tuple[int, int]:
    """Analytic (params, conv mult-adds) for the layers under the given prefixes."""
    params = 0
    macs = 0
    for spec in layer_plan(config):
        if not spec.name.startswith(prefixes):
            continue
        params += spec.cout * spec.cin * spec.k * spec.k + spec.cout
        macs += spec.out_hw * spec.out_hw * spec.cout * spec.cin * spec.k * spec.k
    return params, macs


def count_params_flops(config: NetworkConfig, mode: Mode) -> tuple[int, int]:
    """Analytic (params, conv mult-adds) for one forward at config.input_size.

    Counts convolution multiply-accumulates only; upsampling and activations are
    parameter-free and negligible next to the convs.
    """
    return count_prefix_params_flops(config, _MODE_PREFIXES[mode])


# ---------------------------------------------------------------------------
# checkpoint file: one-line JSON manifest + raw little-endian float32 blobs

_CKPT_FORMAT = "enjoint-ckpt-v1"


def save_checkpoint(
    path,
    weights: NetworkWeights,
    config: NetworkConfig,
    velocities: dict[str, torch.Tensor] | None = None,
) -> str:
    """Write a single-file checkpoint; returns its content hash (sha256 hex)."""
    entries = []
    blobs = []
    offset = 0

    def add(section: str, name: str, tensor: torch.Tensor):
        nonlocal offset
        arr = np.ascontiguousarray(
            tensor.detach().to(torch.float32).numpy(), dtype="<f4"
        )
        raw = arr.tobytes()
        entries.append(
            {
                "section": section,
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    for name, p in weights.params.items():
        add("params", name, p)
    for name, v in (velocities or {}).items():
        add("velocities", name, v)
    manifest = {
        "format": _CKPT_FORMAT,
        "config": config.to_dict(),
        "step": weights.step,
        "blob_bytes": offset,
        "tensors": entries,
    }
    payload = json.dumps(manifest, sort_keys=True).encode() + b"\n" + b"".join(blobs)
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path) -> tuple[NetworkWeights, NetworkConfig, dict[str, torch.Tensor]]:
    """Read a checkpoint; returns (weights, config, velocities) bit-exactly."""
    data = open(path, "rb").read()
    nl = data.index(b"\n")
    manifest = json.loads(data[:nl].decode())
    if manifest.get("format") != _CKPT_FORMAT:
        raise ValueError(f"{path}: not an enjoint checkpoint")
    blob = data[nl + 1 :]
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"{path}: truncated checkpoint blob")
    params: dict[str, torch.Tensor] = {}
    velocities: dict[str, torch.Tensor] = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        tensor = torch.from_numpy(arr)
        (params if e["section"] == "params" else velocities)[e["name"]] = tensor
    config = NetworkConfig.from_dict(manifest["config"])
    return NetworkWeights(params, step=manifest["step"]), config, velocities


def checkpoint_hash(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()
