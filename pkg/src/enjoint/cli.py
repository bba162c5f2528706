"""Command-line interface.

Subcommands: ``synth`` (dataset generation), ``train`` (three-stage schedule),
``infer`` (det / enh / dual modes), ``eval`` (mAP per water type + enhancement
metrics), ``bench`` (latency / params / mult-adds) and ``embed`` (domain-gap
matrices + 2-D projections). Every command that produces an output directory
drops exactly one ``run_manifest.json`` there, written atomically at the end.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The environment
variable ``ENJOINT_THREADS`` caps compute threads (default: all cores).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, embedviz
from .aquasynth import (
    DatasetSizes,
    SceneConfig,
    SHIFTED_TYPES,
    WaterPreset,
    WaterType,
    DEFAULT_PRESETS,
    build_datasets,
    export_dataset,
    load_dataset,
    read_ppm,
    write_ppm,
)
from .evaluation import evaluate_map, gray_world_deviation, psnr
from .model import (
    Mode,
    NetworkConfig,
    checkpoint_hash,
    count_params_flops,
    count_prefix_params_flops,
    forward,
    load_checkpoint,
)
from .trainer import StageSchedule, TrainConfig, run_training


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file handling


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}") from e


def scene_from_config(cfg: dict) -> SceneConfig:
    s = cfg.get("scene", {})
    return SceneConfig(
        image_size=s.get("image_size", 96),
        object_count_range=tuple(s.get("object_count_range", (1, 4))),
        class_count=s.get("class_count", 4),
        min_object_size=s.get("min_object_size", 12),
        seed=s.get("seed", 0),
    )


def presets_from_config(cfg: dict) -> dict[WaterType, WaterPreset]:
    presets = dict(DEFAULT_PRESETS)
    for name, p in cfg.get("water_presets", {}).items():
        presets[WaterType(name)] = WaterPreset(
            tuple(p["beta"]), tuple(p["background"]), p.get("haze_sigma", 0.0)
        )
    return presets


def sizes_from_config(cfg: dict) -> DatasetSizes:
    s = cfg.get("sizes", {})
    return DatasetSizes(
        train_pairs=s.get("train_pairs", 256),
        train_labeled=s.get("train_labeled", 256),
        eval_pairs=s.get("eval_pairs", 64),
        eval_labeled=s.get("eval_labeled", 64),
    )


def network_from_config(cfg: dict) -> NetworkConfig:
    if "network" in cfg:
        base = NetworkConfig().to_dict()
        base.update(cfg["network"])
        return NetworkConfig.from_dict(base)
    return NetworkConfig()


def train_from_config(cfg: dict) -> TrainConfig:
    t = cfg.get("train", {})
    sched = t.get("schedule", {})
    return TrainConfig(
        schedule=StageSchedule(
            burnin_steps=sched.get("burnin_steps", 1500),
            mutual_steps=sched.get("mutual_steps", 2400),
            total_steps=sched.get("total_steps", 3000),
        ),
        base_lr=t.get("base_lr", 0.01),
        momentum=t.get("momentum", 0.9),
        lr_decay=t.get("lr_decay", 0.1),
        det_batch=t.get("det_batch", 16),
        enh_batch=t.get("enh_batch", 8),
        seed=t.get("seed", 0),
        checkpoint_every=t.get("checkpoint_every", 500),
        loss_weights=t.get("loss_weights"),
    )


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_run_manifest(
    out_dir: Path,
    command: str,
    cfg: dict,
    dataset_hash: str = "",
    checkpoint_ids: dict | None = None,
    seed: int | None = None,
    t0: float | None = None,
) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "dataset_hash": dataset_hash,
        "checkpoint_ids": checkpoint_ids or {},
        "tool_version": __version__,
        "wall_clock_s": 0.0 if t0 is None else round(time.perf_counter() - t0, 3),
        "seed": seed,
    }
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out_dir / "run_manifest.json")


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise RuntimeError(f"output directory {path} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    out = _prepare_out_dir(args.out, args.force)
    scene = scene_from_config(cfg)
    seed = args.seed if args.seed is not None else scene.seed
    home = WaterType(cfg.get("home_type", "greenish"))
    bundle = build_datasets(
        scene,
        presets=presets_from_config(cfg),
        sizes=sizes_from_config(cfg),
        seed=seed,
        home_type=home,
    )
    digest = export_dataset(bundle, out)
    print(f"[synth] wrote dataset to {out} (content hash {digest[:16]}...)")
    write_run_manifest(out, "synth", cfg, dataset_hash=digest, seed=seed, t0=t0)
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    if not (data_dir / "manifest.json").exists():
        raise RuntimeError(f"no dataset manifest in {args.data}")
    dataset_manifest = json.loads((data_dir / "manifest.json").read_text())
    dataset_hash = dataset_manifest.get("content_hash", "")
    expected = cfg.get("expected_dataset_hash")
    if expected and expected != dataset_hash:
        raise RuntimeError(
            f"dataset hash mismatch: config expects {expected[:16]}..., "
            f"directory has {dataset_hash[:16]}..."
        )
    bundle = load_dataset(data_dir)
    net = network_from_config(cfg)
    train_cfg = train_from_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(
        bundle,
        net,
        train_cfg,
        out,
        resume_from=args.resume,
        progress_every=args.progress_every,
    )
    print(f"[train] finished in {result.wall_clock_s:.1f}s; log at {result.log_path}")
    write_run_manifest(
        out,
        "train",
        cfg,
        dataset_hash=dataset_hash,
        checkpoint_ids=result.hashes,
        seed=train_cfg.seed,
        t0=t0,
    )
    return 0


def _image_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    weights, net, _ = load_checkpoint(args.checkpoint)
    mode = {"det": Mode.DETECT, "enh": Mode.ENHANCE, "dual": Mode.DUAL}[args.mode]
    images_dir = Path(args.images)
    out = _prepare_out_dir(args.out, args.force)
    names = sorted(p.name for p in images_dir.glob("*.ppm"))
    det_records = []
    for name in names:
        img = read_ppm(images_dir / name)
        if img.shape[:2] != (net.input_size, net.input_size):
            raise RuntimeError(
                f"{name}: image size {img.shape[:2]} does not match checkpoint "
                f"input size {net.input_size}"
            )
        result = forward(
            _image_to_tensor(img), weights, net, mode, args.conf_thresh, args.nms_iou
        )
        if result.detections is not None:
            det_records.append(
                {
                    "image": name,
                    "detections": [
                        {
                            "box": list(d.box),
                            "class": d.class_id,
                            "confidence": d.confidence,
                        }
                        for d in result.detections
                    ],
                }
            )
        if result.enhanced is not None:
            enhanced = result.enhanced[0].numpy().transpose(1, 2, 0)
            write_ppm(out / f"enh_{name}", enhanced)
    if mode in (Mode.DETECT, Mode.DUAL):
        (out / "detections.json").write_text(json.dumps(det_records, indent=2))
    print(f"[infer] processed {len(names)} images in {args.mode} mode")
    write_run_manifest(
        out,
        "infer",
        {"checkpoint": str(args.checkpoint), "mode": args.mode},
        checkpoint_ids={"checkpoint": checkpoint_hash(args.checkpoint)},
        t0=t0,
    )
    return 0


def _detect_all(bundle_split, weights, net, conf, nms):
    dets = []
    gts = []
    for sample in bundle_split:
        result = forward(_image_to_tensor(sample.image), weights, net, Mode.DETECT, conf, nms)
        dets.append(result.detections)
        gts.append((sample.boxes, sample.classes))
    return dets, gts


def evaluate_checkpoint(weights, net, bundle, conf=0.001, nms=0.45) -> dict:
    """Detection mAP per water type plus enhancement metrics; pure function."""
    report: dict = {"detection": {}, "enhancement": {}}
    for wt, samples in bundle.eval_labeled.items():
        dets, gts = _detect_all(samples, weights, net, conf, nms)
        report["detection"][wt.value] = evaluate_map(
            dets, gts, class_count=bundle.scene_config.class_count
        ).to_dict()
    psnr_enh = []
    psnr_deg = []
    for pair in bundle.eval_pairs:
        result = forward(_image_to_tensor(pair.degraded), weights, net, Mode.ENHANCE)
        enhanced = result.enhanced[0].numpy().transpose(1, 2, 0)
        psnr_enh.append(psnr(enhanced, pair.clear))
        psnr_deg.append(psnr(pair.degraded, pair.clear))
    report["enhancement"]["pairs"] = {
        "psnr_enhanced_mean": float(np.mean(psnr_enh)),
        "psnr_degraded_mean": float(np.mean(psnr_deg)),
        "psnr_gain_db": float(np.mean(psnr_enh) - np.mean(psnr_deg)),
    }
    for wt, samples in bundle.eval_labeled.items():
        gw_raw = []
        gw_enh = []
        for s in samples:
            result = forward(_image_to_tensor(s.image), weights, net, Mode.ENHANCE)
            enhanced = result.enhanced[0].numpy().transpose(1, 2, 0)
            gw_raw.append(gray_world_deviation(s.image))
            gw_enh.append(gray_world_deviation(enhanced))
        report["enhancement"][wt.value] = {
            "gray_world_raw_mean": float(np.mean(gw_raw)),
            "gray_world_enhanced_mean": float(np.mean(gw_enh)),
        }
    return report


def _flatten(prefix: str, obj, rows: list) -> None:
    if isinstance(obj, dict):
        for key in sorted(obj):
            _flatten(f"{prefix}.{key}" if prefix else str(key), obj[key], rows)
    elif isinstance(obj, (int, float)):
        rows.append((prefix, obj))


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    weights, net, _ = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.data)
    out = _prepare_out_dir(args.out, args.force)
    report = evaluate_checkpoint(weights, net, bundle, args.conf_thresh, args.nms_iou)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.csv:
        rows: list = []
        _flatten("", report, rows)
        (out / "metrics.csv").write_text(
            "metric,value\n" + "\n".join(f"{k},{v}" for k, v in rows) + "\n"
        )
    for wt, block in sorted(report["detection"].items()):
        print(f"[eval] {wt}: map50={block['map50']:.4f} map5095={block['map5095']:.4f}")
    pairs = report["enhancement"]["pairs"]
    print(
        f"[eval] pairs: psnr enh {pairs['psnr_enhanced_mean']:.2f} dB vs "
        f"degraded {pairs['psnr_degraded_mean']:.2f} dB"
    )
    write_run_manifest(
        out,
        "eval",
        {"checkpoint": str(args.checkpoint)},
        dataset_hash=json.loads((Path(args.data) / "manifest.json").read_text()).get(
            "content_hash", ""
        ),
        checkpoint_ids={"checkpoint": checkpoint_hash(args.checkpoint)},
        t0=t0,
    )
    return 0


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    if args.iters < 10:
        raise UsageError("--iters must be >= 10")
    weights, net, _ = load_checkpoint(args.checkpoint)
    modes = list(Mode) if args.mode == "all" else [
        {"det": Mode.DETECT, "enh": Mode.ENHANCE, "dual": Mode.DUAL}[args.mode]
    ]
    p_det, f_det = count_params_flops(net, Mode.DETECT)
    p_enh, f_enh = count_params_flops(net, Mode.ENHANCE)
    p_dual, f_dual = count_params_flops(net, Mode.DUAL)
    p_bb, f_bb = count_prefix_params_flops(net, ("backbone.",))
    if p_dual != p_det + p_enh - p_bb:
        raise RuntimeError("parameter identity violated; refusing to report")
    assert f_dual < f_det + f_enh
    rng = np.random.default_rng(0)
    img = _image_to_tensor(rng.random((net.input_size, net.input_size, 3), dtype=np.float32))
    report = {}
    for mode in modes:
        forward(img, weights, net, mode)  # warmup
        times = []
        for _ in range(args.iters):
            start = time.perf_counter()
            forward(img, weights, net, mode)
            times.append((time.perf_counter() - start) * 1000.0)
        times.sort()
        median = statistics.median(times)
        p95 = times[min(len(times) - 1, int(round(0.95 * (len(times) - 1))))]
        params, macs = count_params_flops(net, mode)
        report[mode.value] = {
            "latency_ms_median": round(median, 3),
            "latency_ms_p95": round(p95, 3),
            "fps_median": round(1000.0 / median, 2),
            "params": params,
            "mult_adds": macs,
        }
        print(
            f"[bench] {mode.value}: {median:.2f} ms median "
            f"({1000.0 / median:.1f} fps), {params / 1e6:.3f} M params, "
            f"{macs / 1e6:.2f} M mult-adds"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        write_run_manifest(
            out,
            "bench",
            {"checkpoint": str(args.checkpoint), "mode": args.mode, "iters": args.iters},
            checkpoint_ids={"checkpoint": checkpoint_hash(args.checkpoint)},
            t0=t0,
        )
    return 0


def cmd_embed(args) -> int:
    t0 = time.perf_counter()
    ckpt_paths = [p for p in args.checkpoints.split(",") if p]
    if not ckpt_paths:
        raise UsageError("need at least one checkpoint")
    bundle = load_dataset(args.data)
    out = _prepare_out_dir(args.out, args.force)
    gaps: dict[str, dict] = {}
    csv_rows = []
    ck_ids = {}
    set_order = []
    for path in ckpt_paths:
        weights, net, _ = load_checkpoint(path)
        ck_id = Path(path).stem
        while ck_id in gaps:
            ck_id += "+"
        ck_ids[ck_id] = checkpoint_hash(path)
        sets = []
        for wt in SHIFTED_TYPES:
            if wt not in bundle.eval_labeled:
                continue
            images = [s.image for s in bundle.eval_labeled[wt]]
            sets.append(
                embedviz.collect_embeddings(weights, net, images, tag=wt.value, checkpoint_id=ck_id)
            )
        gaps[ck_id] = embedviz.gap_matrix(sets)
        stacked = np.concatenate([s.matrix for s in sets], axis=0)
        proj = embedviz.pca_project(stacked, k=2)
        offset = 0
        for s in sets:
            csv_rows.append((s, proj.projection[offset : offset + len(s.matrix)]))
            offset += len(s.matrix)
        set_order.append(ck_id)
    comparisons = []
    tags = [wt.value for wt in SHIFTED_TYPES]
    for i, a in enumerate(set_order):
        for b in set_order[i + 1 :]:
            for x in range(len(tags)):
                for y in range(x + 1, len(tags)):
                    comparisons.append(
                        {
                            "from": a,
                            "to": b,
                            "pair": [tags[x], tags[y]],
                            "reduced": bool(gaps[b][tags[x]][tags[y]] < gaps[a][tags[x]][tags[y]]),
                        }
                    )
    (out / "gaps.json").write_text(
        json.dumps({"gaps": gaps, "comparisons": comparisons}, indent=2, sort_keys=True)
    )
    (out / "projections.csv").write_text(embedviz.projections_to_csv(csv_rows))
    print(f"[embed] wrote gap matrices for {len(set_order)} checkpoints to {out}")
    write_run_manifest(
        out,
        "embed",
        {"checkpoints": ckpt_paths},
        dataset_hash=json.loads((Path(args.data) / "manifest.json").read_text()).get(
            "content_hash", ""
        ),
        checkpoint_ids=ck_ids,
        t0=t0,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enjoint",
        description="joint underwater image enhancement + detection on synthetic scenes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate dataset splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the three-stage schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--progress-every", type=int, default=250)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="inference in det/enh/dual mode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["det", "enh", "dual"], required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conf-thresh", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conf-thresh", type=float, default=0.001)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--csv", action="store_true", help="also write flattened metrics.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="latency / params / mult-adds report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["det", "enh", "dual", "all"], default="all")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("embed", help="embedding gaps and 2-D projections")
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_embed)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ENJOINT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
