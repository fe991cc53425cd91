"""Pipeline driver: baselines, report plumbing, determinism, ablations."""

import json

import numpy as np
import pytest

from ditr.depthmap import save_sample, write_manifest
from ditr.pipeline import PipelineModels, nn_fill_baseline, run_pipeline
from ditr.synth import SceneConfig, generate_sample


def test_nn_fill_copies_nearest_valid():
    raw = np.zeros((4, 6), np.float32)
    raw[:, 0] = 1.0
    raw[:, 5] = 3.0
    invalid = np.zeros((4, 6), bool)
    invalid[:, 2] = True  # also a valid-but-distrusted column
    raw[:, 2] = 9.9
    out = nn_fill_baseline(raw, invalid)
    assert (out > 0).all()
    assert (out[:, 2] != 9.9).all()  # distrusted values replaced
    assert out[0, 1] == 1.0 and out[0, 4] == 3.0


def test_nn_fill_noop_when_everything_known():
    raw = np.full((3, 3), 2.0, np.float32)
    out = nn_fill_baseline(raw, np.zeros((3, 3), bool))
    np.testing.assert_array_equal(out, raw)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, toy_seg, toy_branches):
    """A 4-sample corpus on disk plus checkpointed toy models."""
    from ditr.codec import save_codec_checkpoint
    from ditr.diffusion import save_unet_checkpoint
    from ditr.segmenter import save_seg_checkpoint

    data = tmp_path_factory.mktemp("data")
    entries = []
    for i in range(4):
        seed = 100 + 31 * i  # matches the toy corpus generator
        s = generate_sample(seed, SceneConfig(height=32, width=32))
        stem = f"sample_{i:05d}"
        save_sample(data, stem, s)
        entries.append((stem, seed))
    write_manifest(data, entries)

    ckpt = tmp_path_factory.mktemp("ckpt")
    save_seg_checkpoint(ckpt / "seg.ckpt", toy_seg)
    codec, unet_o = toy_branches.optical
    _, unet_g = toy_branches.geometric
    save_codec_checkpoint(ckpt / "codec.ckpt", codec)
    save_unet_checkpoint(ckpt / "unet_opt.ckpt", unet_o)
    save_unet_checkpoint(ckpt / "unet_geo.ckpt", unet_g)
    models = PipelineModels.load(ckpt / "seg.ckpt", ckpt / "codec.ckpt",
                                 ckpt / "unet_opt.ckpt", ckpt / "unet_geo.ckpt")
    return data, models


def test_run_pipeline_writes_reports(tiny_run, tmp_path):
    data, models = tiny_run
    body = run_pipeline(data, models, tmp_path, steps=8, seed=1)
    assert (tmp_path / "report_none.json").exists()
    assert (tmp_path / "report_none.txt").exists()
    agg = body["aggregate"]["overall"]
    for key in ("rmse", "mae", "rel", "delta_105", "delta_110", "delta_125"):
        assert key in agg
    assert agg["delta_105"] <= agg["delta_110"] <= agg["delta_125"]
    assert body["baselines"]["nn_fill"]["overall"]["rmse"] > 0
    # per-sample reports carry the required region labels
    regions = set(body["per_sample"][0].keys())
    assert {"overall", "optical", "geometric"} <= regions


def test_run_pipeline_deterministic(tiny_run, tmp_path):
    data, models = tiny_run
    a = run_pipeline(data, models, tmp_path / "a", steps=6, seed=9)
    b = run_pipeline(data, models, tmp_path / "b", steps=6, seed=9)
    a.pop("inpaint_seconds")
    b.pop("inpaint_seconds")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_singleton_aggregate_equals_sample(tiny_run, tmp_path):
    data, models = tiny_run
    body = run_pipeline(data, models, tmp_path, steps=6, seed=2, limit=1)
    per = body["per_sample"][0]["overall"]
    agg = body["aggregate"]["overall"]
    for key in ("rmse", "mae", "rel"):
        assert agg[key] == pytest.approx(per[key], rel=1e-9)


def test_ablations_run_and_label_reports(tiny_run, tmp_path):
    data, models = tiny_run
    for ablate in ("no-refine", "no-partition"):
        body = run_pipeline(data, models, tmp_path, steps=6, seed=3, ablate=ablate,
                            limit=2)
        assert body["ablate"] == ablate
        assert (tmp_path / f"report_{ablate}.json").exists()
    with pytest.raises(ValueError):
        run_pipeline(data, models, tmp_path, ablate="bogus")


def test_missing_checkpoint_reports_remedy(tmp_path):
    with pytest.raises(FileNotFoundError, match="train it first"):
        PipelineModels.load(tmp_path / "nope.ckpt", tmp_path / "c.ckpt",
                            tmp_path / "o.ckpt", tmp_path / "g.ckpt")


def test_dump_boundaries_writes_pngs(tiny_run, tmp_path):
    data, models = tiny_run
    run_pipeline(data, models, tmp_path, steps=6, seed=4, limit=1,
                 dump_boundaries=tmp_path / "bnd")
    files = sorted(p.name for p in (tmp_path / "bnd").iterdir())
    assert any(name.endswith("_m_rgb.png") for name in files)
    assert any(name.endswith("_m_d.png") for name in files)
    assert any(name.endswith("_m_da.png") for name in files)
