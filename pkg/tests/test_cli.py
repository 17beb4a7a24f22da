import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ustssm.checkpoint import load_checkpoint
from ustssm.cli import BENCH_COLUMNS, PERF_COLUMNS, main, perf_bench
from ustssm.data import PointCloudVideo, read_dataset, write_pcv
from ustssm.model import ModelConfig, UstSsm, load_model

SMALL = {"channels": 8, "n_spatial": 8, "k_group": 4, "k_prompts": 3, "d_state": 2, "k_knn": 4}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--classes", "2", "--videos-per-class", "4", "--frames", "4",
                 "--points", "16", "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "small.json"),
                 "--epochs", "2", "--batch-size", "4", "--out", str(root / "run")]) == 0
    return root


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["fly"], ["train", "--bogus"], ["perf-bench", "--frames", "32,16"],
                                  ["scan-bench", "--curve", "XXY"], ["eval"], ["gen-data", "--noise", "x"]])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_help_exits_zero(capsys):
    for cmd in ("gen-data", "train", "eval", "scan-bench", "export-viz", "perf-bench"):
        assert main([cmd, "--help"]) == 0
        assert "--seed" in capsys.readouterr().out


def test_runtime_errors(tmp_path):
    missing = str(tmp_path / "nope")
    assert main(["eval", "--checkpoint", missing, "--data", missing]) == 2
    assert main(["scan-bench", "--data", missing]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", missing]) == 2
    (tmp_path / "unknown.json").write_text('{"colour": 1}')
    assert main(["gen-data", "--config", str(tmp_path / "unknown.json"), "--out", missing]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ustssm"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_pipeline_outputs(workspace, capsys):
    data = read_dataset(workspace / "data")
    assert len(data) == 8 and {v.label for v in data} == {0, 1}
    log = rows(workspace / "run" / "train_log.csv")
    assert [r["epoch"] for r in log] == ["0", "1"]
    assert list(log[0]) == ["epoch", "lr", "train_loss", "train_acc", "val_acc"]
    _, meta = load_checkpoint(workspace / "run" / "model.ustc")
    assert meta["model_config"]["channels"] == 8 and "best_val_acc" in meta
    out = workspace / "metrics.json"
    assert main(["eval", "--checkpoint", str(workspace / "run" / "model.ustc"),
                 "--data", str(workspace / "data"), "--out", str(out)]) == 0
    metrics = json.loads(out.read_text())
    assert np.array(metrics["confusion"]).sum() == 8
    assert "accuracy" in capsys.readouterr().out


def test_eval_class_mismatch_is_runtime_error(workspace, tmp_path):
    assert main(["gen-data", "--classes", "3", "--videos-per-class", "1", "--frames", "4",
                 "--points", "16", "--out", str(tmp_path / "d3")]) == 0
    assert main(["eval", "--checkpoint", str(workspace / "run" / "model.ustc"),
                 "--data", str(tmp_path / "d3")]) == 2


def test_train_zero_lr_keeps_initial_parameters(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "small.json"),
                 "--epochs", "2", "--lr", "0", "--seed", "5", "--out", str(tmp_path / "r")]) == 0
    trained = load_model(tmp_path / "r" / "model.ustc")
    fresh = UstSsm(ModelConfig(**{**SMALL, "frames": 4, "n_classes": 2, "seed": 5}))
    for k, t in fresh.named_parameters().items():
        assert np.array_equal(trained.named_parameters()[k].data, t.data), k


def test_train_is_reproducible(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "small.json"),
                 "--epochs", "2", "--batch-size", "4", "--out", str(tmp_path / "again")]) == 0
    assert ((tmp_path / "again" / "train_log.csv").read_bytes()
            == (workspace / "run" / "train_log.csv").read_bytes())
    assert ((tmp_path / "again" / "model.ustc").read_bytes()
            == (workspace / "run" / "model.ustc").read_bytes())


def test_export_viz(workspace, tmp_path):
    clip = tmp_path / "clip.pcv"
    write_pcv(read_dataset(workspace / "data")[0], clip)
    assert main(["export-viz", "--checkpoint", str(workspace / "run" / "model.ustc"),
                 "--input", str(clip), "--out", str(tmp_path / "viz")]) == 0
    clusters = rows(tmp_path / "viz" / "clusters.csv")
    weights = rows(tmp_path / "viz" / "weights.csv")
    L = 2 * SMALL["n_spatial"]
    assert len(clusters) == len(weights) == L
    assert list(clusters[0]) == ["point", "frame", "cluster_id"]
    assert all(0 <= int(r["cluster_id"]) < SMALL["k_prompts"] for r in clusters)
    assert all(float(r["weight"]) >= 0 for r in weights)
    ply = (tmp_path / "viz" / "clusters.ply").read_text().splitlines()
    assert ply[0] == "ply" and f"element vertex {L}" in ply


def test_export_viz_duplicated_frames_share_clusters(workspace, tmp_path):
    base = np.random.default_rng(0).normal(size=(1, 16, 3))
    clip = tmp_path / "dup.pcv"
    write_pcv(PointCloudVideo(np.repeat(base, 4, axis=0)), clip)
    assert main(["export-viz", "--checkpoint", str(workspace / "run" / "model.ustc"),
                 "--input", str(clip), "--out", str(tmp_path / "viz")]) == 0
    by_frame = {}
    for r in rows(tmp_path / "viz" / "clusters.csv"):
        by_frame.setdefault(r["frame"], {})[r["point"]] = r["cluster_id"]
    a, b = by_frame.values()
    assert a == b


def test_export_viz_incompatible_clip(workspace, tmp_path):
    clip = tmp_path / "long.pcv"
    write_pcv(PointCloudVideo(np.random.default_rng(0).normal(size=(8, 16, 3))), clip)
    assert main(["export-viz", "--checkpoint", str(workspace / "run" / "model.ustc"),
                 "--input", str(clip), "--out", str(tmp_path / "viz")]) == 2


def test_scan_bench_csv(workspace, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["scan-bench", "--data", str(workspace / "data"), "--trials", "3",
                 "--points", "8", "--out", str(out)]) == 0
    table = rows(out)
    assert tuple(table[0]) == BENCH_COLUMNS
    assert len(table) == 15
    assert all(r["bijective"] == "true" for r in table)
    stable = [(r["strategy"], r["curve"], r["mean_adjacent_distance"]) for r in table]
    assert main(["scan-bench", "--data", str(workspace / "data"), "--trials", "3",
                 "--points", "8", "--out", str(out)]) == 0
    assert [(r["strategy"], r["curve"], r["mean_adjacent_distance"]) for r in rows(out)] == stable


def test_scan_bench_filters(tmp_path):
    out = tmp_path / "b.csv"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"videos_per_class": 1, "T": 4, "N": 16}))
    assert main(["scan-bench", "--config", str(cfg), "--trials", "2", "--points", "8",
                 "--strategy", "stss", "--curve", "hilbert", "--out", str(out)]) == 0
    assert [(r["strategy"], r["curve"]) for r in rows(out)] == [("stss", "Hilbert")]


def test_perf_bench_csv(tmp_path):
    out = tmp_path / "perf.csv"
    assert main(["perf-bench", "--frames", "4,8", "--points", "16", "--channels", "8", "--runs", "1",
                 "--out", str(out)]) == 0
    table = rows(out)
    assert tuple(table[0]) == PERF_COLUMNS
    assert [r["frames"] for r in table] == ["4", "8"]
    assert table[0]["time_ratio"] == "" and float(table[1]["alloc_ratio"]) > 1


def test_perf_bench_single_row():
    result = perf_bench([4], points=16, channels=8, runs=1)
    assert len(result) == 1 and "time_ratio" not in result[0]
