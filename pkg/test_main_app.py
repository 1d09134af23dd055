# test_main_app.py
import csv
import logging
import os

import numpy as np
import pytest

import main_app
import map_io


@pytest.fixture(autouse=True)
def _reset_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()


TINY = ["--set", "synth_count=3", "--set", "synth_height=16", "--set", "synth_width=16", "--set", "synth_d_max=4",
        "--set", "synth_layers=1", "--set", "gen_base_channels=2", "--set", "gen_top_k=3",
        "--set", "disc_feat_channels=2", "--set", "disc_head_depth=2", "--set", "train_crop=16",
        "--set", "train_batch=2", "--set", "train_epochs=2", "--set", "train_warmup_epochs=1",
        "--set", "train_lr=0.001", "--set", "eval_n_points=10", "--set", "eval_plots=false"]


def _run(tmp_path, command, out, *extra):
    data = str(tmp_path / "data")
    argv = [command, "--out", str(tmp_path / out), "--set", f"dataset_dir={data}"] + TINY + list(extra)
    return main_app.main(argv)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_synth_writes_dataset_and_run_files(tmp_path):
    assert _run(tmp_path, "synth", "synth") == 0
    assert sorted(os.listdir(tmp_path / "data")) == ["scene_0000", "scene_0001", "scene_0002"]
    out = tmp_path / "synth"
    assert (out / "run.log").is_file()
    assert (out / "effective_config.txt").is_file()
    assert not (out / main_app.INCOMPLETE_MARKER).exists()


def test_eval_with_ground_truth_confidence_hits_lower_bound(tmp_path):
    assert _run(tmp_path, "synth", "synth") == 0
    assert _run(tmp_path, "eval", "eval", "--set", "eval_confidence=ground_truth") == 0
    rows = _rows(str(tmp_path / "eval" / main_app.REPORT_NAME))
    assert [r["image"] for r in rows] == ["scene_0000", "scene_0001", "scene_0002", "mean"]
    for r in rows:
        assert abs(float(r["AUC"]) - float(r["optimal_AUC"])) < 1e-12
    assert (tmp_path / "eval" / "curves" / "scene_0000_curve.csv").is_file()


def test_full_pipeline(tmp_path):
    assert _run(tmp_path, "synth", "synth") == 0
    assert _run(tmp_path, "train", "run") == 0
    assert os.path.isfile(tmp_path / "run" / "checkpoints" / "latest.txt")
    assert _run(tmp_path, "infer", "run", "--set", "infer_dump_fusion=true") == 0
    scene = tmp_path / "run" / "scene_0001"
    for name in ("disp_wta.pfm", "disp.pfm", "conf.pfm", "fusion_cost.pfm", "fusion_disp.pfm", "fusion_color.pfm"):
        assert (scene / name).is_file(), name
    conf = map_io.read_pfm(str(scene / "conf.pfm"))
    assert conf.shape == (16, 16) and np.all((conf > 0) & (conf < 1))

    first = (scene / "disp.pfm").read_bytes()
    assert _run(tmp_path, "infer", "run") == 0
    assert (scene / "disp.pfm").read_bytes() == first

    assert _run(tmp_path, "refine", "run") == 0
    assert (scene / "disp_refined.pfm").is_file() and (scene / "gcp.pfm").is_file()
    assert _run(tmp_path, "eval", "run") == 0
    rows = _rows(str(tmp_path / "run" / main_app.REPORT_NAME))
    assert rows[-1]["image"] == "mean"
    assert rows[0]["BMP1_refined"] != ""


def test_train_holds_out_validation_samples(tmp_path):
    assert _run(tmp_path, "synth", "synth") == 0
    assert _run(tmp_path, "train", "run", "--set", "train_validation_count=1", "--set", "train_epochs=1") == 0
    rows = _rows(str(tmp_path / "run" / "checkpoints" / "epoch_metrics.csv"))
    assert [r["epoch"] for r in rows] == ["1"]


def _tree(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            files[os.path.relpath(path, root)] = open(path, "rb").read()
    return files


def test_effective_config_reproduces_training_run(tmp_path):
    assert _run(tmp_path, "synth", "synth") == 0
    assert _run(tmp_path, "train", "run", "--seed", "4") == 0
    saved = str(tmp_path / "run" / "effective_config.txt")
    assert main_app.main(["train", "--config", saved, "--out", str(tmp_path / "rerun")]) == 0

    assert _tree(tmp_path / "run" / "checkpoints") == _tree(tmp_path / "rerun" / "checkpoints")
    first = open(saved, encoding="utf-8").read().splitlines()
    second = open(tmp_path / "rerun" / "effective_config.txt", encoding="utf-8").read().splitlines()
    assert [l for l in first if not l.startswith("out_dir=")] == [l for l in second if not l.startswith("out_dir=")]


def test_unknown_key_exits_with_config_status(tmp_path):
    assert main_app.main(["synth", "--out", str(tmp_path / "o"), "--set", "bogus=1"]) == 2


def test_invalid_value_combination_exits_with_config_status(tmp_path):
    assert _run(tmp_path, "synth", "synth", "--set", "train_validation_count=5") == 0
    assert _run(tmp_path, "train", "bad", "--set", "train_validation_count=5") == 2
    assert (tmp_path / "bad" / main_app.INCOMPLETE_MARKER).exists()


def test_missing_dataset_leaves_incomplete_marker(tmp_path):
    status = main_app.main(["eval", "--out", str(tmp_path / "o"), "--set", f"dataset_dir={tmp_path / 'none'}"])
    assert status == 1
    assert (tmp_path / "o" / main_app.INCOMPLETE_MARKER).exists()


def test_infer_without_checkpoint_fails(tmp_path):
    assert _run(tmp_path, "synth", "synth") == 0
    assert _run(tmp_path, "infer", "empty") == 1


def test_gradcheck_command(tmp_path):
    assert main_app.main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    rows = _rows(str(tmp_path / "g" / main_app.GRADCHECK_REPORT_NAME))
    assert rows and all(r["passed"] == "True" for r in rows)
