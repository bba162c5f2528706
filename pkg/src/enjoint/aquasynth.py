"""Procedural underwater scene synthesis.

Generates clear labeled seabed scenes (colored shapes on a textured background,
one canonical shape per class) and degrades them with a per-channel
attenuation/backscatter water model::

    I_c = J_c * t_c + B_c * (1 - t_c),   t_c = exp(-beta_c * depth)

followed by an optional Gaussian blur for turbid water. Everything is
deterministic in (config, seed): each sample draws from its own splitmix64-derived
stream, so generation order never matters.

Dataset roles produced by :func:`build_datasets`:

* ``pairs``        - degraded/clear training pairs over mixed water types
* ``labeled``      - labeled training scenes degraded with one designated home
                     water type (the manufactured domain shift)
* ``unpaired``     - the labeled images without their annotations
* ``eval_pairs``   - held-out pairs for full-reference enhancement metrics
* ``eval_labeled`` - the same held-out scenes degraded per water type
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 mixing step; the basis for all per-sample seed streams."""
    x = (x + _GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def sample_seed(master: int, index: int) -> int:
    """64-bit seed for global sample ``index`` within master seed's stream."""
    return splitmix64((master + index * _GAMMA) & _MASK64)


class WaterType(enum.Enum):
    CLEAR = "clear"
    GREENISH = "greenish"
    BLUISH = "bluish"
    TURBID = "turbid"


@dataclass(frozen=True)
class DegradationParams:
    """Attenuation/backscatter coefficients for one water column."""

    beta: tuple[float, float, float]
    background: tuple[float, float, float]
    depth: float
    haze_sigma: float = 0.0

    def __post_init__(self):
        if any(b < 0 for b in self.beta):
            raise ValueError("beta must be non-negative per channel")
        if any(not 0.0 <= b <= 1.0 for b in self.background):
            raise ValueError("background veiling light must lie in [0,1]")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass(frozen=True)
class WaterPreset:
    beta: tuple[float, float, float]
    background: tuple[float, float, float]
    haze_sigma: float = 0.0

    def at_depth(self, depth: float) -> DegradationParams:
        return DegradationParams(self.beta, self.background, depth, self.haze_sigma)


# Values chosen to visibly mimic greenish / bluish / turbid casts at depths ~0.5-2.
DEFAULT_PRESETS: dict[WaterType, WaterPreset] = {
    WaterType.CLEAR: WaterPreset((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0),
    WaterType.GREENISH: WaterPreset((0.8, 0.2, 0.6), (0.25, 0.55, 0.35), 0.0),
    WaterType.BLUISH: WaterPreset((1.2, 0.6, 0.15), (0.10, 0.30, 0.60), 0.0),
    WaterType.TURBID: WaterPreset((0.5, 0.5, 0.5), (0.45, 0.45, 0.40), 1.5),
}

SHIFTED_TYPES = (WaterType.GREENISH, WaterType.BLUISH, WaterType.TURBID)


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 96
    object_count_range: tuple[int, int] = (1, 4)
    class_count: int = 4
    min_object_size: int = 12
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.object_count_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad object_count_range {self.object_count_range}")
        if self.min_object_size < 4:
            raise ValueError("min_object_size must be >= 4")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")


@dataclass
class LabeledSample:
    image: np.ndarray  # H x W x 3 float32 in [0,1]
    boxes: np.ndarray  # n x 4 float32, xyxy pixels
    classes: np.ndarray  # n int64 in [0, class_count)

    def copy(self) -> "LabeledSample":
        return LabeledSample(self.image.copy(), self.boxes.copy(), self.classes.copy())


@dataclass
class PairedSample:
    degraded: np.ndarray
    clear: np.ndarray


# ---------------------------------------------------------------------------
# image helpers


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxW(xC) float image, half-pixel-centers convention."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    was_2d = img.ndim == 2
    img = img.astype(np.float32, copy=False)
    if was_2d:
        img = img[..., None]
    ys = np.clip((np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    rows = img[y0] * (1 - wy) + img[y1] * wy
    out = rows[:, x0] * (1 - wx) + rows[:, x1] * wx
    return out[..., 0] if was_2d else out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding on an HxW(xC) float image."""
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, wk in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += wk * padded[tuple(sl)]
        out = acc
    return out.astype(img.dtype)


def quantize8(img: np.ndarray) -> np.ndarray:
    """Snap a [0,1] float image onto the 8-bit grid (what PPM export preserves)."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# scene rendering

_CLASS_COLORS = np.array(
    [
        (0.80, 0.25, 0.20),  # disc: red-orange
        (0.85, 0.75, 0.20),  # star: yellow
        (0.60, 0.30, 0.65),  # ellipse: purple
        (0.15, 0.45, 0.25),  # blob: dark green
        (0.20, 0.55, 0.70),  # extra classes cycle through these
        (0.75, 0.45, 0.10),
    ],
    dtype=np.float64,
)


def _fill_polygon(h: int, w: int, verts: np.ndarray) -> np.ndarray:
    """Even-odd rasterization of a closed polygon over pixel centers."""
    py, px = np.mgrid[0:h, 0:w]
    py = py + 0.5
    px = px + 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _shape_mask(h, w, cls, cx, cy, size, rng):
    """Boolean mask for one object; shape family is fixed by class id mod 4."""
    r = size / 2.0
    kind = cls % 4
    if kind == 0:
        py, px = np.mgrid[0:h, 0:w]
        return (px + 0.5 - cx) ** 2 + (py + 0.5 - cy) ** 2 <= r * r
    if kind == 1:
        rot = rng.uniform(0, 2 * math.pi)
        angles = rot + np.arange(10) * math.pi / 5.0
        radii = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
        verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        return _fill_polygon(h, w, verts)
    if kind == 2:
        rot = rng.uniform(0, math.pi)
        b = r * rng.uniform(0.55, 0.85)
        py, px = np.mgrid[0:h, 0:w]
        dx = px + 0.5 - cx
        dy = py + 0.5 - cy
        u = dx * math.cos(rot) + dy * math.sin(rot)
        v = -dx * math.sin(rot) + dy * math.cos(rot)
        return (u / r) ** 2 + (v / b) ** 2 <= 1.0
    rot = rng.uniform(0, 2 * math.pi)
    m = 10
    radii = r * rng.uniform(0.55, 1.0, size=m)
    radii = (radii + np.roll(radii, 1) + np.roll(radii, -1)) / 3.0  # smooth spikes
    angles = rot + np.arange(m) * 2 * math.pi / m
    verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    return _fill_polygon(h, w, verts)


def _seabed(h: int, w: int, rng) -> np.ndarray:
    base = np.array([0.55, 0.50, 0.40]) + rng.uniform(-0.08, 0.08, size=3)
    img = np.tile(base, (h, w, 1))
    coarse = rng.normal(0.0, 1.0, size=(6, 6, 3))
    img += 0.05 * resize_bilinear(coarse.astype(np.float32), h, w).astype(np.float64)
    img += 0.015 * rng.normal(0.0, 1.0, size=(h, w, 3))
    grad = np.linspace(-0.04, 0.04, h)[:, None, None]
    img += grad
    return np.clip(img, 0.0, 1.0)


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def render_scene(cfg: SceneConfig, seed: int) -> LabeledSample:
    """Render one clear-water scene with tight boxes, deterministic in (cfg, seed)."""
    s = cfg.image_size
    lo, hi = cfg.object_count_range
    if lo > 0 and s < 2 * cfg.min_object_size + 8:
        raise ValueError(
            f"image_size {s} too small to place objects of min size {cfg.min_object_size}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    img = _seabed(s, s, rng)
    n = int(rng.integers(lo, hi + 1))
    boxes: list[tuple[float, float, float, float]] = []
    classes: list[int] = []
    size_lo = cfg.min_object_size + 4
    size_hi = max(size_lo + 2, int(0.45 * s))
    for _ in range(n):
        cls = int(rng.integers(cfg.class_count))
        mask = None
        for attempt in range(12):
            size = float(rng.uniform(size_lo, size_hi))
            r = size / 2.0
            m = 2.0
            if s - 2 * (r + m) <= 1:
                continue
            cx = float(rng.uniform(r + m, s - r - m))
            cy = float(rng.uniform(r + m, s - r - m))
            cand = _shape_mask(s, s, cls, cx, cy, size, rng)
            if not cand.any():
                continue
            ys, xs = np.nonzero(cand)
            bb = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            if bb[2] - bb[0] < cfg.min_object_size or bb[3] - bb[1] < cfg.min_object_size:
                continue
            if any(_box_iou(bb, prev) > 0.30 for prev in boxes) and attempt < 11:
                continue
            mask = cand
            box = bb
            center = (cx, cy)
            radius = r
            break
        if mask is None:
            # guaranteed-fit fallback: centered disc of the minimum legal size
            radius = (cfg.min_object_size + 4) / 2.0
            cx = float(rng.uniform(radius + 2, s - radius - 2))
            cy = float(rng.uniform(radius + 2, s - radius - 2))
            mask = _shape_mask(s, s, 0, cx, cy, radius * 2, rng)
            ys, xs = np.nonzero(mask)
            box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            center = (cx, cy)
        color = _CLASS_COLORS[cls % len(_CLASS_COLORS)] + rng.uniform(-0.08, 0.08, size=3)
        py, px = np.nonzero(mask)
        dist = np.sqrt((px + 0.5 - center[0]) ** 2 + (py + 0.5 - center[1]) ** 2)
        shade = 1.0 - 0.25 * np.clip(dist / max(radius, 1.0), 0.0, 1.0)
        img[py, px, :] = np.clip(color[None, :] * shade[:, None], 0.0, 1.0)
        boxes.append(box)
        classes.append(cls)
    return LabeledSample(
        image=img.astype(np.float32),
        boxes=np.array(boxes, dtype=np.float32).reshape(-1, 4),
        classes=np.array(classes, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# water model


def degrade(clear: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Apply the attenuation/backscatter model, then turbidity blur; clamps to [0,1].

    Dtype-preserving: feed float64 to keep the invert roundtrip at ~1e-15.
    """
    t = np.exp(-np.asarray(params.beta, dtype=clear.dtype) * clear.dtype.type(params.depth))
    bg = np.asarray(params.background, dtype=clear.dtype)
    out = clear * t[None, None, :] + bg[None, None, :] * (1.0 - t[None, None, :])
    if params.haze_sigma > 0:
        out = gaussian_blur(out, params.haze_sigma)
    return np.clip(out, 0.0, 1.0)


def invert_degrade(degraded: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Algebraic inverse of :func:`degrade` (oracle path; requires no blur)."""
    if params.haze_sigma > 0:
        raise ValueError("cannot invert a blurred degradation")
    t = np.exp(-np.asarray(params.beta, dtype=degraded.dtype) * degraded.dtype.type(params.depth))
    if np.any(t <= 1e-6):
        raise ValueError("transmission too small to invert (t <= 1e-6)")
    bg = np.asarray(params.background, dtype=degraded.dtype)
    return (degraded - bg[None, None, :] * (1.0 - t[None, None, :])) / t[None, None, :]


# ---------------------------------------------------------------------------
# dataset building


@dataclass(frozen=True)
class DatasetSizes:
    train_pairs: int = 256
    train_labeled: int = 256
    eval_pairs: int = 64
    eval_labeled: int = 64

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 1:
                raise ValueError(f"size {name} must be >= 1")


@dataclass(frozen=True)
class SplitLayout:
    """Disjoint global seed-index ranges, one per split."""

    ranges: dict[str, tuple[int, int]]  # name -> (start, count)

    def __post_init__(self):
        spans = sorted((s, s + c, n) for n, (s, c) in self.ranges.items())
        for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError(f"overlapping seed ranges for splits {n1!r} and {n2!r}")

    @classmethod
    def pack(cls, sizes: DatasetSizes) -> "SplitLayout":
        names = [
            ("train_pairs", sizes.train_pairs),
            ("train_labeled", sizes.train_labeled),
            ("eval_pairs", sizes.eval_pairs),
            ("eval_labeled", sizes.eval_labeled),
        ]
        ranges = {}
        start = 0
        for name, count in names:
            ranges[name] = (start, count)
            start += count
        return cls(ranges)


@dataclass
class DatasetBundle:
    pairs: list[PairedSample]
    labeled: list[LabeledSample]
    unpaired: list[np.ndarray]
    eval_pairs: list[PairedSample]
    eval_labeled: dict[WaterType, list[LabeledSample]]
    scene_config: SceneConfig
    presets: dict[WaterType, WaterPreset]
    sizes: DatasetSizes
    seed: int
    home_type: WaterType = WaterType.GREENISH

    def content_hash(self) -> str:
        return _bundle_hash(self)


HOME_DEPTH_RANGE = (0.7, 1.3)
PAIR_DEPTH_RANGE = (0.5, 2.0)


def _water_draw(seed: int, types: tuple[WaterType, ...], depth_range) -> tuple[WaterType, float]:
    rng = np.random.Generator(np.random.PCG64(seed))
    wt = types[int(rng.integers(len(types)))]
    depth = float(rng.uniform(*depth_range))
    return wt, depth


def build_datasets(
    cfg: SceneConfig,
    presets: dict[WaterType, WaterPreset] | None = None,
    sizes: DatasetSizes | None = None,
    seed: int | None = None,
    home_type: WaterType = WaterType.GREENISH,
    layout: SplitLayout | None = None,
) -> DatasetBundle:
    """Synthesize every split deterministically from one master seed.

    Training pairs mix all shifted water types; the labeled split sticks to
    ``home_type`` at mild depth, which manufactures the domain shift probed by
    the per-type eval splits (same scenes, same depths, different water).
    """
    presets = dict(DEFAULT_PRESETS if presets is None else presets)
    sizes = sizes or DatasetSizes()
    seed = cfg.seed if seed is None else seed
    layout = layout or SplitLayout.pack(sizes)
    for name in ("train_pairs", "train_labeled", "eval_pairs", "eval_labeled"):
        if name not in layout.ranges:
            raise ValueError(f"layout missing split {name!r}")

    def scene_at(gidx: int) -> LabeledSample:
        return render_scene(cfg, sample_seed(seed, gidx))

    def pair_at(gidx: int) -> PairedSample:
        scene = scene_at(gidx)
        wt, depth = _water_draw(
            splitmix64(sample_seed(seed, gidx) ^ 0xA5A5), SHIFTED_TYPES, PAIR_DEPTH_RANGE
        )
        deg = degrade(scene.image, presets[wt].at_depth(depth))
        return PairedSample(quantize8(deg), quantize8(scene.image))

    start, count = layout.ranges["train_pairs"]
    pairs = [pair_at(start + i) for i in range(count)]

    start, count = layout.ranges["train_labeled"]
    labeled = []
    for i in range(count):
        scene = scene_at(start + i)
        _, depth = _water_draw(
            splitmix64(sample_seed(seed, start + i) ^ 0xB6B6), (home_type,), HOME_DEPTH_RANGE
        )
        img = quantize8(degrade(scene.image, presets[home_type].at_depth(depth)))
        labeled.append(LabeledSample(img, scene.boxes, scene.classes))
    unpaired = [s.image for s in labeled]

    start, count = layout.ranges["eval_pairs"]
    eval_pairs = [pair_at(start + i) for i in range(count)]

    start, count = layout.ranges["eval_labeled"]
    eval_labeled: dict[WaterType, list[LabeledSample]] = {
        wt: [] for wt in (WaterType.CLEAR,) + SHIFTED_TYPES
    }
    for i in range(count):
        scene = scene_at(start + i)
        _, depth = _water_draw(
            splitmix64(sample_seed(seed, start + i) ^ 0xC7C7), (home_type,), HOME_DEPTH_RANGE
        )
        for wt in eval_labeled:
            img = quantize8(degrade(scene.image, presets[wt].at_depth(depth)))
            eval_labeled[wt].append(LabeledSample(img, scene.boxes, scene.classes))

    return DatasetBundle(
        pairs=pairs,
        labeled=labeled,
        unpaired=unpaired,
        eval_pairs=eval_pairs,
        eval_labeled=eval_labeled,
        scene_config=cfg,
        presets=presets,
        sizes=sizes,
        seed=seed,
        home_type=home_type,
    )


# ---------------------------------------------------------------------------
# on-disk format: PPM images, CSV labels, JSON manifest


def write_ppm(path: Path | str, img: np.ndarray) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def ppm_bytes(img: np.ndarray) -> bytes:
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_ppm(path: Path | str) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (raw.reshape(h, w, 3).astype(np.float32) / 255.0)


def _labels_csv(samples: list[LabeledSample]) -> str:
    lines = ["index,x1,y1,x2,y2,class"]
    for i, s in enumerate(samples):
        for box, cls in zip(s.boxes, s.classes):
            lines.append(f"{i},{box[0]:.2f},{box[1]:.2f},{box[2]:.2f},{box[3]:.2f},{int(cls)}")
    return "\n".join(lines) + "\n"


def _parse_labels_csv(text: str, count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    per_index: list[list[tuple[float, float, float, float, int]]] = [[] for _ in range(count)]
    lines = text.strip().splitlines()
    if not lines or lines[0] != "index,x1,y1,x2,y2,class":
        raise ValueError("labels.csv: bad header")
    for line in lines[1:]:
        idx, x1, y1, x2, y2, cls = line.split(",")
        per_index[int(idx)].append((float(x1), float(y1), float(x2), float(y2), int(cls)))
    out = []
    for rows in per_index:
        boxes = np.array([r[:4] for r in rows], dtype=np.float32).reshape(-1, 4)
        classes = np.array([r[4] for r in rows], dtype=np.int64)
        out.append((boxes, classes))
    return out


def _manifest_dict(bundle: DatasetBundle) -> dict:
    return {
        "format_version": 1,
        "seed": bundle.seed,
        "home_type": bundle.home_type.value,
        "scene_config": {
            "image_size": bundle.scene_config.image_size,
            "object_count_range": list(bundle.scene_config.object_count_range),
            "class_count": bundle.scene_config.class_count,
            "min_object_size": bundle.scene_config.min_object_size,
            "seed": bundle.scene_config.seed,
        },
        "presets": {
            wt.value: {
                "beta": list(p.beta),
                "background": list(p.background),
                "haze_sigma": p.haze_sigma,
            }
            for wt, p in sorted(bundle.presets.items(), key=lambda kv: kv[0].value)
        },
        "sizes": {
            "train_pairs": bundle.sizes.train_pairs,
            "train_labeled": bundle.sizes.train_labeled,
            "eval_pairs": bundle.sizes.eval_pairs,
            "eval_labeled": bundle.sizes.eval_labeled,
        },
    }


def _iter_export_files(bundle: DatasetBundle):
    """Yield (relative path, bytes) for every data file, in a fixed order."""
    for i, p in enumerate(bundle.pairs):
        yield f"d_ps/degraded/{i:05d}.ppm", ppm_bytes(p.degraded)
        yield f"d_ps/clear/{i:05d}.ppm", ppm_bytes(p.clear)
    for i, s in enumerate(bundle.labeled):
        yield f"d_lr/images/{i:05d}.ppm", ppm_bytes(s.image)
    yield "d_lr/labels.csv", _labels_csv(bundle.labeled).encode()
    for i, img in enumerate(bundle.unpaired):
        yield f"d_ur/images/{i:05d}.ppm", ppm_bytes(img)
    for i, p in enumerate(bundle.eval_pairs):
        yield f"eval_pairs/degraded/{i:05d}.ppm", ppm_bytes(p.degraded)
        yield f"eval_pairs/clear/{i:05d}.ppm", ppm_bytes(p.clear)
    for wt, samples in sorted(bundle.eval_labeled.items(), key=lambda kv: kv[0].value):
        for i, s in enumerate(samples):
            yield f"eval_{wt.value}/images/{i:05d}.ppm", ppm_bytes(s.image)
        yield f"eval_{wt.value}/labels.csv", _labels_csv(samples).encode()


def _bundle_hash(bundle: DatasetBundle) -> str:
    h = hashlib.sha256()
    for rel, payload in _iter_export_files(bundle):
        h.update(rel.encode())
        h.update(hashlib.sha256(payload).digest())
    h.update(json.dumps(_manifest_dict(bundle), sort_keys=True).encode())
    return h.hexdigest()


def export_dataset(bundle: DatasetBundle, outdir: Path | str) -> str:
    """Write all splits plus manifest.json; returns the content hash."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for rel, payload in _iter_export_files(bundle):
        path = outdir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    manifest = _manifest_dict(bundle)
    manifest["content_hash"] = _bundle_hash(bundle)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest["content_hash"]


def load_dataset(path: Path | str) -> DatasetBundle:
    """Load an exported dataset directory back into memory."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    sc = manifest["scene_config"]
    cfg = SceneConfig(
        image_size=sc["image_size"],
        object_count_range=tuple(sc["object_count_range"]),
        class_count=sc["class_count"],
        min_object_size=sc["min_object_size"],
        seed=sc["seed"],
    )
    presets = {
        WaterType(name): WaterPreset(tuple(p["beta"]), tuple(p["background"]), p["haze_sigma"])
        for name, p in manifest["presets"].items()
    }
    sizes = DatasetSizes(**manifest["sizes"])

    def load_images(subdir: str, count: int) -> list[np.ndarray]:
        return [read_ppm(path / subdir / f"{i:05d}.ppm") for i in range(count)]

    def load_labeled(split: str, count: int) -> list[LabeledSample]:
        images = load_images(f"{split}/images", count)
        labels = _parse_labels_csv((path / split / "labels.csv").read_text(), count)
        return [LabeledSample(img, b, c) for img, (b, c) in zip(images, labels)]

    pairs = [
        PairedSample(d, c)
        for d, c in zip(
            load_images("d_ps/degraded", sizes.train_pairs),
            load_images("d_ps/clear", sizes.train_pairs),
        )
    ]
    labeled = load_labeled("d_lr", sizes.train_labeled)
    unpaired = load_images("d_ur/images", sizes.train_labeled)
    eval_pairs = [
        PairedSample(d, c)
        for d, c in zip(
            load_images("eval_pairs/degraded", sizes.eval_pairs),
            load_images("eval_pairs/clear", sizes.eval_pairs),
        )
    ]
    eval_labeled = {}
    for wt in (WaterType.CLEAR,) + SHIFTED_TYPES:
        split = f"eval_{wt.value}"
        if (path / split).exists():
            eval_labeled[wt] = load_labeled(split, sizes.eval_labeled)
    bundle = DatasetBundle(
        pairs=pairs,
        labeled=labeled,
        unpaired=unpaired,
        eval_pairs=eval_pairs,
        eval_labeled=eval_labeled,
        scene_config=cfg,
        presets=presets,
        sizes=sizes,
        seed=manifest["seed"],
        home_type=WaterType(manifest["home_type"]),
    )
    return bundle
