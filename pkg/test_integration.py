#!/usr/bin/env python3
"""
End-to-end tests through the command line: phantom -> train -> synthesize ->
evaluate -> classify, on tiny volumes.
"""

import logging
import os
import sys
from unittest.mock import patch

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from checkpoint import read_container
from dataset import load_dataset, load_mask_dir, load_volume_dir
from pipeline import Pipeline
from volume_io import Volume, save_volume
from voxsynth_main import main

TINY_UNET = ["--depth", "1", "--base-channels", "2", "--folds", "3"]


@pytest.fixture(autouse=True)
def detach_cli_logging():
    root = logging.getLogger()
    level = root.level
    yield
    for handler in list(root.handlers):
        if getattr(handler, "_voxsynth", False):
            root.removeHandler(handler)
    root.setLevel(level)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in list(os.environ):
        if name.startswith("VOXSYNTH_"):
            monkeypatch.delenv(name)


def make_phantom(directory, n=6, size=8, seed=3):
    assert main(["phantom", "--out", str(directory), "--n", str(n), "--size", str(size),
                 "--seed", str(seed)]) == 0
    return directory


def copy_targets(data, directory):
    for subject in load_dataset(data).subjects:
        save_volume(subject.target, directory / f"{subject.subject_id}.rvol")
    return directory


def test_phantom_is_reproducible(tmp_path, capsys):
    first = make_phantom(tmp_path / "a")
    second = make_phantom(tmp_path / "b")
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    assert "manifest.csv" in names and "config.env" in names
    assert len([n for n in names if n.endswith(".rvol")]) == 12
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()
    out = capsys.readouterr().out
    assert "6 subjects (3 class 0, 3 class 1)" in out


def test_odd_strict_phantom_is_a_config_error(tmp_path, capsys):
    code = main(["phantom", "--out", str(tmp_path / "p"), "--n", "3", "--balance", "strict"])
    assert code == 1
    errors = [line for line in capsys.readouterr().err.splitlines() if line.startswith("ERROR:")]
    assert len(errors) == 1
    assert errors[0].startswith("ERROR:config:")


@pytest.mark.parametrize("argv", [
    ["phantom", "--n", "4"],
    ["phantom", "--out", "x", "--mode", "mirror"],
    ["phantom", "--out", "x", "--n", "four"],
    ["compress", "--out", "x"],
    [],
])
def test_usage_errors_follow_the_error_format(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1
    assert err[0].startswith("ERROR:config:")


def test_help_still_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["phantom", "--help"])
    assert exit_info.value.code == 0
    assert "--out" in capsys.readouterr().out


def test_io_failures_are_reported(tmp_path, capsys):
    with patch.object(Pipeline, "phantom", side_effect=OSError("disk full")):
        assert main(["phantom", "--out", str(tmp_path)]) == 1
    assert "ERROR:io:disk full" in capsys.readouterr().err


def test_missing_dataset_is_a_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "t")]) == 1
    assert "ERROR:data:" in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(tmp_path):
    data = make_phantom(tmp_path / "data")
    out = tmp_path / "unet"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--fold", "0"] + TINY_UNET) == 0

    assert (out / "config.env").is_file()
    assert read_container(out / "fold0" / "unet.unck").step == 2
    lines = (out / "fold0" / "train_log.csv").read_text().splitlines()
    assert lines[0] == "# voxsynth train method=unet fold=0"
    epoch, step, train_loss, val_loss = lines[1].split(",")
    assert (epoch, step) == ("0", "2")
    assert np.isfinite(float(train_loss)) and np.isfinite(float(val_loss))
    assert "fold=0" in read_container(out / "fold0" / "unet.unck").blob.splitlines()


def test_resume_matches_uninterrupted_run(tmp_path):
    data = make_phantom(tmp_path / "data")
    common = ["train", "--data", str(data), "--fold", "1", "--strict"] + TINY_UNET
    assert main(common + ["--out", str(tmp_path / "split"), "--epochs", "1"]) == 0
    assert main(common + ["--out", str(tmp_path / "split"), "--epochs", "2", "--resume"]) == 0
    assert main(common + ["--out", str(tmp_path / "whole"), "--epochs", "2"]) == 0

    split = read_container(tmp_path / "split" / "fold1" / "unet.unck")
    whole = read_container(tmp_path / "whole" / "fold1" / "unet.unck")
    assert split.step == whole.step == 4
    assert all(a.tobytes() == b.tobytes() for a, b in zip(split.params, whole.params))
    log = (tmp_path / "split" / "fold1" / "train_log.csv").read_text().splitlines()
    assert [line.split(",")[:2] for line in log[1:]] == [["0", "2"], ["1", "4"]]


def test_synthesize_with_slices(tmp_path):
    data = make_phantom(tmp_path / "data")
    train_out = tmp_path / "unet"
    assert main(["train", "--data", str(data), "--out", str(train_out), "--epochs", "1"] + TINY_UNET) == 0
    pred = tmp_path / "pred"
    assert main(["synthesize", "--checkpoint", str(train_out / "fold0" / "unet.unck"),
                 "--data", str(data), "--out", str(pred), "--slices"]) == 0

    volumes = load_volume_dir(pred)
    assert sorted(volumes) == [f"sub{i:03d}" for i in range(6)]
    assert all(v.dims == (8, 8, 8) for v in volumes.values())
    assert load_mask_dir(pred) == {}
    slices = sorted(p.name for p in (pred / "slices").iterdir())
    assert len(slices) == 6 * 3 * 2
    assert "sub000_pred_axial.pgm" in slices and "sub005_target_sagittal.pgm" in slices
    assert (pred / "slices" / "sub000_input_axial.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


def test_synthesize_routes_subjects_to_their_round(tmp_path, capsys):
    data = make_phantom(tmp_path / "data")
    train_out = tmp_path / "unet"
    assert main(["train", "--data", str(data), "--out", str(train_out), "--epochs", "1",
                 "--fold", "all"] + TINY_UNET) == 0
    checkpoints = []
    for r in range(3):
        checkpoints += ["--checkpoint", str(train_out / f"fold{r}" / "unet.unck")]
    assert main(["synthesize", "--data", str(data), "--out", str(tmp_path / "pred")] + checkpoints) == 0
    assert "6 prediction(s)" in capsys.readouterr().out
    assert len(load_volume_dir(tmp_path / "pred")) == 6


def test_evaluate_perfect_predictions(tmp_path, capsys):
    data = make_phantom(tmp_path / "data")
    pred = tmp_path / "same"
    pred.mkdir()
    copy_targets(data, pred)
    out = tmp_path / "eval"
    assert main(["evaluate", "--pred", f"same={pred}", "--data", str(data), "--out", str(out)]) == 0

    lines = (out / "same_metrics.csv").read_text().splitlines()
    assert lines[0] == "subject,mae,psnr,ssim"
    assert lines[1] == "sub000,0.0,inf,1.0"
    comparison = (out / "comparison.csv").read_text().splitlines()
    assert comparison[0] == "method,ssim,mae,psnr"
    assert comparison[1] == "same,1.0000 ± 0.0000,0.0000 ± 0.0000,n/a"
    assert "infinite PSNR" in (out / "same_summary.txt").read_text()
    assert "same,1.0000" in capsys.readouterr().out


def test_evaluate_scores_every_method_on_shared_coverage(tmp_path):
    data = make_phantom(tmp_path / "data")
    inner = np.zeros((8, 8, 8), bool)
    inner[2:6, 2:6, 2:6] = True
    full = tmp_path / "full"
    edge = tmp_path / "edge"
    full.mkdir()
    edge.mkdir()
    for subject in load_dataset(data).subjects:
        wrong_border = np.where(inner, subject.target.data, 1.0 - subject.target.data)
        save_volume(Volume(wrong_border), full / f"{subject.subject_id}.rvol")
        save_volume(subject.target, edge / f"{subject.subject_id}.rvol")
        save_volume(Volume(inner.astype(np.float32)), edge / f"{subject.subject_id}_coverage.rvol")

    out = tmp_path / "eval"
    assert main(["evaluate", "--pred", f"full={full}", "--pred", f"edge={edge}", "--data", str(data),
                 "--out", str(out)]) == 0
    for method in ("full", "edge"):
        row = (out / f"{method}_metrics.csv").read_text().splitlines()[1]
        assert row == "sub000,0.0,inf,1.0"


def test_evaluate_rejects_mismatched_subject_sets(tmp_path, capsys):
    data = make_phantom(tmp_path / "data")
    full = tmp_path / "full"
    full.mkdir()
    copy_targets(data, full)
    partial = tmp_path / "partial"
    partial.mkdir()
    save_volume(load_dataset(data).subjects[0].target, partial / "sub000.rvol")
    code = main(["evaluate", "--pred", f"a={full}", "--pred", f"b={partial}", "--data", str(data),
                 "--out", str(tmp_path / "eval")])
    assert code == 1
    assert "ERROR:data:" in capsys.readouterr().err


def test_patch_pipeline_with_coverage(tmp_path):
    data = make_phantom(tmp_path / "data", size=16)
    train_out = tmp_path / "patch"
    assert main(["train", "--method", "patch", "--data", str(data), "--out", str(train_out), "--epochs", "1",
                 "--folds", "3", "--patch-samples", "8", "--patch-batch", "4"]) == 0
    assert read_container(train_out / "fold0" / "patch.unck").step == 4

    pred = tmp_path / "pred"
    assert main(["synthesize", "--checkpoint", str(train_out / "fold0" / "patch.unck"),
                 "--data", str(data), "--out", str(pred)]) == 0
    masks = load_mask_dir(pred)
    assert len(masks) == 6
    # a 16^3 volume leaves 6 border voxels uncovered on each side
    assert masks["sub000"].sum() == 4 ** 3

    out = tmp_path / "eval"
    assert main(["evaluate", "--pred", f"patch={pred}", "--data", str(data), "--out", str(out)]) == 0
    row = (out / "patch_metrics.csv").read_text().splitlines()[1].split(",")
    assert row[0] == "sub000"
    assert all(np.isfinite(float(v)) for v in row[1:])


def test_classify_table(tmp_path, capsys):
    data = make_phantom(tmp_path / "data")
    synth = tmp_path / "synth"
    synth.mkdir()
    copy_targets(data, synth)
    out = tmp_path / "cls"
    assert main(["classify", "--data", str(data), "--synth", f"copy={synth}", "--folds", "3",
                 "--out", str(out)]) == 0

    lines = (out / "classification.csv").read_text().splitlines()
    assert lines[0].split(",") == ["method", "input", "target", "synth", "joint", "t", "p"]
    row = lines[1].split(",")
    assert row[0] == "copy"
    assert all("±" in cell for cell in row[1:5])
    assert 0.0 <= float(row[6]) <= 1.0
    assert len((out / "classification_rounds.csv").read_text().splitlines()) == 1 + 3
    assert (out / "config.env").is_file()
    assert "copy," in capsys.readouterr().out


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
