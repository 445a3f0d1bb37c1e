import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from bsnerf.cli import build_parser, main
from bsnerf.optim import METRICS_HEADER, read_metrics
from bsnerf.scenedata import load_dataset, load_image

TINY_SYNTH = ["--width", "8", "--height", "6", "--focal", "9", "--step", "0.01"]
TINY_TRAIN = ["--rays", "16", "--samples", "8", "--width", "16", "--view-width", "8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--out", str(out), "--seed", "7", *TINY_SYNTH]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", str(dataset), "--out", str(out), "--epochs", "2", "--freeze-poses", *TINY_TRAIN]) == 0
    return out / "checkpoint.bin"


def test_synth_is_deterministic(dataset, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "again"), "--seed", "7", *TINY_SYNTH]) == 0
    a, b = load_dataset(dataset), load_dataset(tmp_path / "again")
    assert a.images.tobytes() == b.images.tobytes()
    assert a.views == 9 and (a.width, a.height) == (8, 6)


def test_synth_noise(dataset, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "noisy"), "--noise", "0.01", *TINY_SYNTH]) == 0
    assert not np.array_equal(load_dataset(tmp_path / "noisy").images, load_dataset(dataset).images)


def test_full_size_geometry_preset():
    ns = build_parser().parse_args(["synth", "--out", "x", "--preset", "full-size"])
    assert ns.preset == "full-size"
    from bsnerf.scenedata import FULL_SIZE_GEOMETRY

    assert (FULL_SIZE_GEOMETRY["width"], FULL_SIZE_GEOMETRY["height"]) == (245, 154)


def test_train_zero_epochs(dataset, tmp_path):
    assert main(["train", str(dataset), "--out", str(tmp_path), "--epochs", "0", *TINY_TRAIN]) == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines == [",".join(METRICS_HEADER)]
    assert (tmp_path / "checkpoint.bin").exists()


def test_train_ablation_flag(dataset, tmp_path):
    assert main(["train", str(dataset), "--out", str(tmp_path), "--epochs", "1", "--no-color-loss", *TINY_TRAIN]) == 0
    assert read_metrics(tmp_path / "metrics.csv")[0]["loss_color"] == 0.0


def test_deterministic_runs_match(dataset, tmp_path):
    for name in ("a", "b"):
        args = ["train", str(dataset), "--out", str(tmp_path / name), "--epochs", "2", "--deterministic", *TINY_TRAIN]
        assert main(args) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_render_full_grid(dataset, checkpoint, tmp_path):
    assert main(["render", str(checkpoint), "--data", str(dataset), "--out", str(tmp_path), "--samples", "8"]) == 0
    assert len(list((tmp_path / "grid").glob("*.imgf32"))) == 81
    assert len(list((tmp_path / "grid").glob("*.png"))) == 81
    assert len(list((tmp_path / "rgb").glob("*.imgf32"))) == 9
    assert load_image(tmp_path / "grid" / "view03_filter05.imgf32").shape == (6, 8, 3)


def test_render_single_image(dataset, checkpoint, tmp_path):
    args = ["render", str(checkpoint), "--data", str(dataset), "--out", str(tmp_path), "--view", "3", "--filter", "5"]
    assert main(args + ["--samples", "8"]) == 0
    assert [p.name for p in (tmp_path / "grid").glob("*.imgf32")] == ["view03_filter05.imgf32"]
    assert not (tmp_path / "rgb").exists()


def test_render_untrained_is_near_uniform(dataset, tmp_path):
    assert main(["train", str(dataset), "--out", str(tmp_path / "r"), "--epochs", "0", *TINY_TRAIN]) == 0
    args = ["render", str(tmp_path / "r" / "checkpoint.bin"), "--data", str(dataset), "--out", str(tmp_path / "img")]
    assert main(args + ["--view", "0", "--filter", "0", "--samples", "16"]) == 0
    img = load_image(tmp_path / "img" / "grid" / "view00_filter00.imgf32")
    # every sample emits roughly the flat spectrum 0.5, so only opacity varies
    chroma = img / img.sum(axis=-1, keepdims=True)
    assert np.max(chroma.std(axis=(0, 1)) / chroma.mean(axis=(0, 1))) < 0.05


def test_eval_table(dataset, checkpoint, tmp_path, capsys):
    assert main(["eval", str(dataset), str(checkpoint), str(checkpoint), "--out", str(tmp_path), "--samples", "8"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert len(rows) == 2
    assert np.isfinite(float(rows[0]["mean_psnr"]))
    assert float(rows[0]["rot_err_deg"]) == pytest.approx(0.0, abs=1e-6)
    assert rows[0]["color_distance"] == rows[1]["color_distance"]
    views = list(csv.DictReader(open(tmp_path / "eval_views.csv")))
    assert len(views) == 18 and all(np.isfinite(float(v["psnr"])) for v in views)
    assert "mean_psnr" in capsys.readouterr().out


def test_eval_without_ground_truth(dataset, checkpoint, tmp_path):
    ds = tmp_path / "nogt"
    shutil.copytree(dataset, ds)
    meta = json.loads((ds / "meta.json").read_text())
    del meta["poses"]
    (ds / "meta.json").write_text(json.dumps(meta))
    assert main(["eval", str(ds), str(checkpoint), "--out", str(tmp_path / "e"), "--samples", "8"]) == 0
    row = next(csv.DictReader(open(tmp_path / "e" / "eval.csv")))
    assert row["rot_err_deg"] == "" and row["trans_err"] == ""
    views = list(csv.DictReader(open(tmp_path / "e" / "eval_views.csv")))
    assert all(v["rot_err_deg"] == "" for v in views)


def test_runtime_failures_exit_one(dataset, tmp_path, capsys):
    assert main(["train", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nonsense")
    assert main(["render", str(bad), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 1
    assert main(["render", str(bad), "--data", str(dataset), "--out", str(tmp_path / "r"), "--view", "12"]) == 1


def test_checkpoint_dataset_mismatch(checkpoint, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "big"), "--width", "10", "--height", "6", "--step", "0.01"]) == 0
    assert main(["render", str(checkpoint), "--data", str(tmp_path / "big"), "--out", str(tmp_path / "r")]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "ds", "--out", "o", "--bogus"],
        ["frobnicate"],
        ["synth"],
        ["train", "ds", "--out", "o", "--epochs", "-3"],
        ["synth", "--out", "o", "--preset", "huge"],
    ],
)
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_help_lists_flags():
    out = subprocess.run([sys.executable, "-m", "bsnerf", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--out", "--seed", "--threads", "--deterministic", "--no-color-loss", "--freeze-poses", "--epochs"):
        assert flag in out.stdout
