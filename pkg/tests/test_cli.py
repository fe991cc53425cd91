"""CLI surface: every subcommand runs end to end at toy scale."""

import json
import subprocess
import sys

import numpy as np
import pytest

from ditr.depthmap import load_depth_png, read_manifest


def run_cli(*args):
    out = subprocess.run([sys.executable, "-m", "ditr.cli", *map(str, args)],
                         capture_output=True, text=True, timeout=1800)
    assert out.returncode == 0, f"ditr {' '.join(map(str, args))}\n{out.stdout}\n{out.stderr}"
    return out


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "ditr.cfg"
    cfg.write_text(
        "[scene]\n"
        "height = 32\n"
        "width = 32\n"
        "\n"
        "[segmenter]\n"
        "epochs = 8\n"
        "base_lr = 0.1\n"
        "\n"
        "[codec]\n"
        "quantize = false\n"
        "epochs = 6\n"
        "lr = 0.05\n"
        "\n"
        "[diffusion]\n"
        "steps = 40\n"
        "timesteps = 10\n"
        "base_channels = 4\n"
    )
    run_cli("--config", cfg, "--seed", "5", "synth", "--count", "6", "--out", root / "data")
    return root, cfg


def test_synth_writes_layout_and_manifest(cli_workspace):
    root, _ = cli_workspace
    entries = read_manifest(root / "data")
    assert len(entries) == 6
    stem, seed = entries[0]
    assert seed == 5
    for suffix in ("_rgb.png", "_depth_raw.png", "_depth_gt.png", "_mask.png"):
        assert (root / "data" / f"{stem}{suffix}").exists()
    units = load_depth_png(root / "data" / f"{stem}_depth_gt.png")
    assert units.dtype == np.uint16 and units.shape == (32, 32)


def test_full_cli_round_trip(cli_workspace):
    root, cfg = cli_workspace
    data = root / "data"
    run_cli("--config", cfg, "train-seg", "--data", data, "--out", root / "seg.ckpt")
    run_cli("--config", cfg, "train-codec", "--data", data, "--out", root / "codec.ckpt")
    for branch, name in (("optical", "unet_opt.ckpt"), ("geometric", "unet_geo.ckpt")):
        run_cli("--config", cfg, "train-diff", "--branch", branch, "--data", data,
                "--codec", root / "codec.ckpt", "--out", root / name)

    run_cli("infer", "--in", data, "--seg", root / "seg.ckpt",
            "--codec", root / "codec.ckpt", "--unet-opt", root / "unet_opt.ckpt",
            "--unet-geo", root / "unet_geo.ckpt", "--out", root / "pred",
            "--steps", "6", "--limit", "2")
    stem = read_manifest(data)[0][0]
    pred = load_depth_png(root / "pred" / f"{stem}_depth_pred.png")
    assert (pred > 0).all()  # no missing pixels in restored output

    run_cli("eval", "--in", data, "--seg", root / "seg.ckpt",
            "--codec", root / "codec.ckpt", "--unet-opt", root / "unet_opt.ckpt",
            "--unet-geo", root / "unet_geo.ckpt", "--out", root / "report",
            "--steps", "6", "--limit", "2", "--ablate", "no-refine")
    body = json.loads((root / "report" / "report_no-refine.json").read_text())
    assert body["ablate"] == "no-refine"


def test_bench_cli_two_stages(cli_workspace, tmp_path):
    root, _ = cli_workspace
    out = run_cli("bench", "--size", "32x32", "--reps", "5", "--steps", "3",
                  "--out", tmp_path / "bench.json")
    body = json.loads((tmp_path / "bench.json").read_text())
    assert [s["stage"] for s in body["stages"]] == ["one", "two"]
    assert "latency_ms" in out.stdout


def test_cli_rejects_bad_size():
    out = subprocess.run([sys.executable, "-m", "ditr.cli", "bench", "--size", "33x47"],
                         capture_output=True, text=True)
    assert out.returncode != 0


def test_cli_missing_checkpoint_exit_code(tmp_path, cli_workspace):
    root, _ = cli_workspace
    out = subprocess.run(
        [sys.executable, "-m", "ditr.cli", "eval", "--in", str(root / "data"),
         "--seg", str(tmp_path / "missing.ckpt"), "--codec", str(tmp_path / "c.ckpt"),
         "--unet-opt", str(tmp_path / "o.ckpt"), "--unet-geo", str(tmp_path / "g.ckpt"),
         "--out", str(tmp_path)],
        capture_output=True, text=True)
    assert out.returncode == 2
    assert "train it first" in out.stderr