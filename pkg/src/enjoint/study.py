"""Multi-seed desk-scale experiments.

Runs the staged schedule over several training seeds on one fixed synthetic
dataset, plus a no-adaptation control arm (mutual stage extended to the final
step), then measures:

* enhancement efficacy at the burn-in checkpoint (paired PSNR vs the degraded
  baseline),
* mutual-learning efficacy (home-domain mAP trajectory and the gray-world
  deviation of enhanced unpaired images),
* domain-adaptation efficacy (cross-water-type embedding gaps at the mutual vs
  final checkpoints, and shifted-domain mAP against the control arm),
* determinism (re-run and resume-from-checkpoint hash equality).

The resulting JSON summary is what the acceptance suite and the experiment
scripts consume.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embedviz
from .aquasynth import (
    DatasetBundle,
    DatasetSizes,
    SceneConfig,
    SHIFTED_TYPES,
    WaterType,
    build_datasets,
    export_dataset,
    load_dataset,
)
from .cli import _image_to_tensor
from .evaluation import evaluate_map, gray_world_deviation, psnr
from .model import Mode, NetworkConfig, forward, load_checkpoint
from .trainer import StageSchedule, TrainConfig, run_training


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple[int, ...] = (101, 202, 303)
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(seed=7))
    sizes: DatasetSizes = field(default_factory=DatasetSizes)
    dataset_seed: int = 7
    net: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: StageSchedule = field(default_factory=lambda: StageSchedule(1500, 2400, 3000))
    det_batch: int = 16
    enh_batch: int = 8
    base_lr: float = 0.01
    conf_thresh: float = 0.001
    nms_iou: float = 0.45


def _train_cfg(study: StudyConfig, seed: int, control: bool) -> TrainConfig:
    sched = study.schedule
    if control:
        sched = StageSchedule(sched.burnin_steps, sched.total_steps, sched.total_steps)
    return TrainConfig(
        schedule=sched,
        base_lr=study.base_lr,
        det_batch=study.det_batch,
        enh_batch=study.enh_batch,
        seed=seed,
        checkpoint_every=0,
    )


def _map50(weights, net, samples, class_count, conf, nms) -> float:
    dets = []
    gts = []
    for s in samples:
        res = forward(_image_to_tensor(s.image), weights, net, Mode.DETECT, conf, nms)
        dets.append(res.detections)
        gts.append((s.boxes, s.classes))
    return evaluate_map(dets, gts, class_count=class_count).map50


def _psnr_block(weights, net, pairs) -> tuple[float, float]:
    enh = []
    deg = []
    for p in pairs:
        res = forward(_image_to_tensor(p.degraded), weights, net, Mode.ENHANCE)
        enhanced = res.enhanced[0].numpy().transpose(1, 2, 0)
        enh.append(psnr(enhanced, p.clear))
        deg.append(psnr(p.degraded, p.clear))
    return float(np.mean(enh)), float(np.mean(deg))


def _gray_world_unpaired(weights, net, images) -> float:
    vals = []
    for img in images:
        res = forward(_image_to_tensor(img), weights, net, Mode.ENHANCE)
        enhanced = res.enhanced[0].numpy().transpose(1, 2, 0)
        vals.append(gray_world_deviation(enhanced))
    return float(np.mean(vals))


def _cross_type_gaps(weights, net, bundle) -> dict[str, float]:
    sets = {
        wt.value: embedviz.collect_embeddings(
            weights, net, [s.image for s in bundle.eval_labeled[wt]], tag=wt.value
        )
        for wt in SHIFTED_TYPES
    }
    tags = sorted(sets)
    out = {}
    for i, a in enumerate(tags):
        for b in tags[i + 1 :]:
            out[f"{a}|{b}"] = embedviz.domain_gap(sets[a], sets[b])
    return out


def measure_run(
    checkpoints: dict[str, str], bundle: DatasetBundle, study: StudyConfig, control: bool
) -> dict:
    """Checkpoint-level metrics needed by the directional criteria."""
    k = bundle.scene_config.class_count
    home = bundle.home_type
    conf, nms = study.conf_thresh, study.nms_iou
    out: dict = {}
    if control:
        weights, net, _ = load_checkpoint(checkpoints["final"])
        out["final"] = {
            "map50_home": _map50(weights, net, bundle.eval_labeled[home], k, conf, nms),
            "map50_bluish": _map50(
                weights, net, bundle.eval_labeled[WaterType.BLUISH], k, conf, nms
            ),
        }
        return out

    weights, net, _ = load_checkpoint(checkpoints["burnin"])
    psnr_enh, psnr_deg = _psnr_block(weights, net, bundle.eval_pairs)
    out["burnin"] = {
        "map50_home": _map50(weights, net, bundle.eval_labeled[home], k, conf, nms),
        "psnr_enhanced": psnr_enh,
        "psnr_degraded": psnr_deg,
        "gray_world_unpaired": _gray_world_unpaired(weights, net, bundle.unpaired),
    }
    weights, net, _ = load_checkpoint(checkpoints["mutual"])
    out["mutual"] = {
        "gray_world_unpaired": _gray_world_unpaired(weights, net, bundle.unpaired),
        "gaps": _cross_type_gaps(weights, net, bundle),
    }
    weights, net, _ = load_checkpoint(checkpoints["final"])
    out["final"] = {
        "map50_home": _map50(weights, net, bundle.eval_labeled[home], k, conf, nms),
        "map50_bluish": _map50(weights, net, bundle.eval_labeled[WaterType.BLUISH], k, conf, nms),
        "gaps": _cross_type_gaps(weights, net, bundle),
    }
    return out


def run_study(
    workdir: Path | str,
    study: StudyConfig = StudyConfig(),
    check_determinism: bool = True,
    progress: bool = True,
) -> dict:
    """Full experiment: dataset synth, per-seed DA + control runs, measurements."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    data_dir = workdir / "dataset"
    if (data_dir / "manifest.json").exists():
        bundle = load_dataset(data_dir)
        dataset_hash = json.loads((data_dir / "manifest.json").read_text())["content_hash"]
    else:
        bundle = build_datasets(
            study.scene, sizes=study.sizes, seed=study.dataset_seed
        )
        dataset_hash = export_dataset(bundle, data_dir)
        bundle = load_dataset(data_dir)  # train on exactly what was written

    summary: dict = {
        "dataset_hash": dataset_hash,
        "seeds": list(study.seeds),
        "schedule": [
            study.schedule.burnin_steps,
            study.schedule.mutual_steps,
            study.schedule.total_steps,
        ],
        "runs": {},
    }
    t_start = time.perf_counter()
    for seed in study.seeds:
        per_seed: dict = {}
        for arm, control in (("da", False), ("control", True)):
            out_dir = workdir / f"seed{seed}_{arm}"
            cfg = _train_cfg(study, seed, control)
            if progress:
                print(f"[study] training seed={seed} arm={arm} ...", flush=True)
            result = run_training(bundle, study.net, cfg, out_dir, progress_every=0)
            per_seed[arm] = {
                "hashes": result.hashes,
                "wall_clock_s": round(result.wall_clock_s, 1),
                "metrics": measure_run(result.checkpoints, bundle, study, control),
                "checkpoints": result.checkpoints,
            }
        summary["runs"][str(seed)] = per_seed
    if check_determinism:
        seed0 = study.seeds[0]
        base = summary["runs"][str(seed0)]["da"]
        if progress:
            print(f"[study] determinism re-run seed={seed0} ...", flush=True)
        rerun = run_training(
            bundle, study.net, _train_cfg(study, seed0, False), workdir / "rerun", progress_every=0
        )
        if progress:
            print(f"[study] resume-from-burnin seed={seed0} ...", flush=True)
        resumed = run_training(
            bundle,
            study.net,
            _train_cfg(study, seed0, False),
            workdir / "resumed",
            resume_from=base["checkpoints"]["burnin"],
            progress_every=0,
        )
        summary["determinism"] = {
            "rerun_final_hash_equal": rerun.hashes["final"] == base["hashes"]["final"],
            "rerun_burnin_hash_equal": rerun.hashes["burnin"] == base["hashes"]["burnin"],
            "resume_final_hash_equal": resumed.hashes["final"] == base["hashes"]["final"],
        }
    summary["wall_clock_s"] = round(time.perf_counter() - t_start, 1)
    (workdir / "study.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def criteria_from_summary(summary: dict) -> dict:
    """Directional-criterion measurements, medians taken across seeds."""
    runs = [summary["runs"][str(s)] for s in summary["seeds"]]
    da = [r["da"]["metrics"] for r in runs]
    control = [r["control"]["metrics"] for r in runs]

    psnr_gain = median([m["burnin"]["psnr_enhanced"] - m["burnin"]["psnr_degraded"] for m in da])
    map_home_delta = median(
        [m["final"]["map50_home"] - m["burnin"]["map50_home"] for m in da]
    )
    gray_world_drop = median(
        [m["burnin"]["gray_world_unpaired"] - m["mutual"]["gray_world_unpaired"] for m in da]
    )
    pair_keys = sorted(da[0]["mutual"]["gaps"])
    gap_reduction = {
        key: {
            "mutual_median": median([m["mutual"]["gaps"][key] for m in da]),
            "final_median": median([m["final"]["gaps"][key] for m in da]),
        }
        for key in pair_keys
    }
    for key, block in gap_reduction.items():
        block["reduced"] = bool(block["final_median"] < block["mutual_median"])
    bluish_advantage = median(
        [m["final"]["map50_bluish"] - c["final"]["map50_bluish"] for m, c in zip(da, control)]
    )
    out = {
        "psnr_gain_db_median": psnr_gain,
        "map50_home_final_minus_burnin_median": map_home_delta,
        "gray_world_unpaired_drop_median": gray_world_drop,
        "gap_reduction": gap_reduction,
        "map50_bluish_da_minus_control_median": bluish_advantage,
        "map50_bluish_da_median": median([m["final"]["map50_bluish"] for m in da]),
        "map50_bluish_control_median": median([c["final"]["map50_bluish"] for c in control]),
        "map50_home_final_median": median([m["final"]["map50_home"] for m in da]),
    }
    if "determinism" in summary:
        out["determinism"] = summary["determinism"]
    return out
