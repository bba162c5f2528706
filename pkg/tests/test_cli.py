"""End-to-end CLI flows on a tiny 32px configuration."""

import json

import numpy as np
import pytest

from enjoint.cli import main
from enjoint.aquasynth import load_dataset
from enjoint.model import load_checkpoint

TINY_NET = {
    "input_size": 32,
    "stem_channels": 4,
    "stage_channels": [8, 16, 32],
    "det_strides": [8, 16],
    "anchors": [
        [[6.0, 6.0], [10.0, 8.0], [8.0, 12.0]],
        [[16.0, 16.0], [22.0, 18.0], [18.0, 24.0]],
    ],
    "class_count": 4,
    "uie_channels": [8, 8, 4, 4],
}

CONFIG = {
    "scene": {
        "image_size": 32,
        "object_count_range": [1, 2],
        "min_object_size": 8,
        "class_count": 4,
        "seed": 5,
    },
    "sizes": {"train_pairs": 10, "train_labeled": 10, "eval_pairs": 3, "eval_labeled": 3},
    "network": TINY_NET,
    "train": {
        "schedule": {"burnin_steps": 3, "mutual_steps": 5, "total_steps": 7},
        "det_batch": 4,
        "enh_batch": 3,
        "seed": 21,
        "checkpoint_every": 0,
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth + train once; most CLI tests read from this workspace."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    assert main(["synth", "--config", str(cfg_path), "--out", str(root / "data")]) == 0
    assert (
        main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--data",
                str(root / "data"),
                "--out",
                str(root / "run"),
                "--progress-every",
                "0",
            ]
        )
        == 0
    )
    return root


def test_synth_deterministic_manifest(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    assert main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["content_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["content_hash"]
    assert ha == hb


def test_synth_respects_sizes(workspace):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["sizes"]["train_pairs"] == 10
    assert len(list((data / "d_ps" / "degraded").glob("*.ppm"))) == 10
    assert len(list((data / "d_lr" / "images").glob("*.ppm"))) == 10
    assert len(list((data / "d_ur" / "images").glob("*.ppm"))) == 10
    assert len(list((data / "eval_pairs" / "clear").glob("*.ppm"))) == 3
    for wt in ("clear", "greenish", "bluish", "turbid"):
        assert len(list((data / f"eval_{wt}" / "images").glob("*.ppm"))) == 3


def test_synth_missing_config_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", "/tmp/nowhere"])
    assert e.value.code == 2


def test_synth_nonexistent_config_usage_error(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_synth_refuses_nonempty_out(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(CONFIG))
    out = tmp_path / "busy"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert main(["synth", "--config", str(cfg_path), "--out", str(out)]) == 1
    assert main(["synth", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0


def test_train_outputs_and_manifest(workspace):
    run = workspace / "run"
    for name in ("burnin", "mutual", "final"):
        assert (run / f"checkpoint_{name}.ckpt").exists()
    log = (run / "train_log.csv").read_text().strip().splitlines()
    assert len(log) == 1 + CONFIG["train"]["schedule"]["total_steps"]
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert set(manifest["checkpoint_ids"]) >= {"burnin", "mutual", "final"}


def test_train_dataset_hash_mismatch_refused(workspace, tmp_path):
    bad_cfg = dict(CONFIG)
    bad_cfg["expected_dataset_hash"] = "0" * 64
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps(bad_cfg))
    code = main(
        [
            "train",
            "--config",
            str(cfg_path),
            "--data",
            str(workspace / "data"),
            "--out",
            str(tmp_path / "run"),
        ]
    )
    assert code == 1


def test_train_resume_reproduces_hash(workspace, tmp_path):
    cfg_path = workspace / "config.json"
    code = main(
        [
            "train",
            "--config",
            str(cfg_path),
            "--data",
            str(workspace / "data"),
            "--out",
            str(tmp_path / "resumed"),
            "--resume",
            str(workspace / "run" / "checkpoint_burnin.ckpt"),
            "--progress-every",
            "0",
        ]
    )
    assert code == 0
    straight = json.loads((workspace / "run" / "run_manifest.json").read_text())
    resumed = json.loads((tmp_path / "resumed" / "run_manifest.json").read_text())
    assert resumed["checkpoint_ids"]["final"] == straight["checkpoint_ids"]["final"]


def test_infer_modes_and_dual_identity(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoint_final.ckpt")
    images = str(workspace / "data" / "eval_greenish" / "images")
    for mode in ("det", "enh", "dual"):
        assert (
            main(
                [
                    "infer",
                    "--checkpoint",
                    ckpt,
                    "--mode",
                    mode,
                    "--images",
                    images,
                    "--out",
                    str(tmp_path / mode),
                    "--conf-thresh",
                    "0.1",
                ]
            )
            == 0
        )
    det_only = json.loads((tmp_path / "det" / "detections.json").read_text())
    dual = json.loads((tmp_path / "dual" / "detections.json").read_text())
    assert det_only == dual  # bitwise identical decode
    assert not list((tmp_path / "det").glob("*.ppm"))
    enh_files = sorted((tmp_path / "enh").glob("*.ppm"))
    dual_files = sorted((tmp_path / "dual").glob("*.ppm"))
    assert [f.name for f in enh_files] == [f.name for f in dual_files]
    for a, b in zip(enh_files, dual_files):
        assert a.read_bytes()[a.read_bytes().index(b"255"):] == b.read_bytes()[b.read_bytes().index(b"255"):]
    # schema check on the detections file
    for record in dual:
        assert set(record) == {"image", "detections"}
        for d in record["detections"]:
            assert set(d) == {"box", "class", "confidence"}
            assert len(d["box"]) == 4
            assert isinstance(d["class"], int)
            assert 0.0 <= d["confidence"] <= 1.0


def test_infer_empty_dir_ok(workspace, tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    code = main(
        [
            "infer",
            "--checkpoint",
            str(workspace / "run" / "checkpoint_final.ckpt"),
            "--mode",
            "det",
            "--images",
            str(empty),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == 0
    assert json.loads((tmp_path / "out" / "detections.json").read_text()) == []


def test_infer_size_mismatch_refused(workspace, tmp_path):
    from enjoint.aquasynth import write_ppm

    images = tmp_path / "imgs"
    images.mkdir()
    write_ppm(images / "big.ppm", np.random.default_rng(0).random((64, 64, 3)))
    code = main(
        [
            "infer",
            "--checkpoint",
            str(workspace / "run" / "checkpoint_final.ckpt"),
            "--mode",
            "det",
            "--images",
            str(images),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == 1


def test_eval_report(workspace, tmp_path):
    code = main(
        [
            "eval",
            "--checkpoint",
            str(workspace / "run" / "checkpoint_final.ckpt"),
            "--data",
            str(workspace / "data"),
            "--out",
            str(tmp_path / "eval"),
        ]
    )
    assert code == 0
    report = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert set(report["detection"]) == {"clear", "greenish", "bluish", "turbid"}
    for block in report["detection"].values():
        assert 0.0 <= block["map50"] <= 1.0
    assert "pairs" in report["enhancement"]
    # recompute one block through the library path
    from enjoint.cli import evaluate_checkpoint

    weights, net, _ = load_checkpoint(workspace / "run" / "checkpoint_final.ckpt")
    bundle = load_dataset(workspace / "data")
    again = evaluate_checkpoint(weights, net, bundle)
    assert again["detection"]["greenish"]["map50"] == report["detection"]["greenish"]["map50"]
    assert (tmp_path / "eval" / "run_manifest.json").exists()


def test_eval_csv_flattening(workspace, tmp_path):
    code = main(
        [
            "eval",
            "--checkpoint",
            str(workspace / "run" / "checkpoint_final.ckpt"),
            "--data",
            str(workspace / "data"),
            "--out",
            str(tmp_path / "eval"),
            "--csv",
        ]
    )
    assert code == 0
    lines = (tmp_path / "eval" / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "metric,value"
    keys = {line.split(",")[0] for line in lines[1:]}
    assert "detection.greenish.map50" in keys
    assert "enhancement.pairs.psnr_gain_db" in keys
    for line in lines[1:]:
        float(line.split(",")[1])


def test_bench_report(workspace, tmp_path, capsys):
    code = main(
        [
            "bench",
            "--checkpoint",
            str(workspace / "run" / "checkpoint_final.ckpt"),
            "--mode",
            "all",
            "--iters",
            "10",
            "--out",
            str(tmp_path / "bench"),
        ]
    )
    assert code == 0
    report = json.loads((tmp_path / "bench" / "bench.json").read_text())
    assert set(report) == {"det", "enh", "dual"}
    assert report["dual"]["mult_adds"] < report["det"]["mult_adds"] + report["enh"]["mult_adds"]
    for block in report.values():
        assert block["latency_ms_median"] > 0
        assert block["params"] > 0


def test_bench_rejects_low_iters(workspace):
    code = main(
        [
            "bench",
            "--checkpoint",
            str(workspace / "run" / "checkpoint_final.ckpt"),
            "--iters",
            "3",
        ]
    )
    assert code == 2


def test_embed_report(workspace, tmp_path):
    run = workspace / "run"
    code = main(
        [
            "embed",
            "--checkpoints",
            f"{run / 'checkpoint_burnin.ckpt'},{run / 'checkpoint_final.ckpt'}",
            "--data",
            str(workspace / "data"),
            "--out",
            str(tmp_path / "embed"),
        ]
    )
    assert code == 0
    payload = json.loads((tmp_path / "embed" / "gaps.json").read_text())
    gaps = payload["gaps"]
    assert set(gaps) == {"checkpoint_burnin", "checkpoint_final"}
    for ck in gaps.values():
        for tag, row in ck.items():
            assert row[tag] == 0.0
    assert payload["comparisons"]
    for comp in payload["comparisons"]:
        assert set(comp) == {"from", "to", "pair", "reduced"}
    lines = (tmp_path / "embed" / "projections.csv").read_text().strip().splitlines()
    assert lines[0] == "tag,checkpoint,x,y"
    assert all(len(line.split(",")) == 4 for line in lines[1:])
    # 3 shifted types x 3 eval images x 2 checkpoints
    assert len(lines) - 1 == 3 * 3 * 2


def test_every_output_dir_has_exactly_one_manifest(workspace):
    for sub in ("data", "run"):
        manifests = list((workspace / sub).rglob("run_manifest.json"))
        assert len(manifests) == 1
