"""FLOP accounting and the two-stage benchmark report."""

import numpy as np

from ditr.bench import (BenchReport, conv_flops, run_bench, stage_two_flops,
                        unet_flops)
from ditr.codec import CodecConfig, init_codec
from ditr.diffusion import BranchModels, UNetConfig, init_unet
from ditr.pipeline import PipelineModels
from ditr.segmenter import SegTrainConfig, init_seg_params
from ditr.synth import SceneConfig, generate_sample


def test_single_conv_closed_form():
    # 3x3 conv, 16 -> 16 channels at 64x64: 2*9*16*16*64*64
    assert conv_flops(16, 16, 3, 64, 64) == 2 * 9 * 16 * 16 * 64 * 64
    assert abs(conv_flops(16, 16, 3, 64, 64) / 1e6 - 18.9) < 0.5


def test_stage_two_flops_monotone_in_steps():
    codec_cfg = CodecConfig()
    unet_cfg = UNetConfig()
    f1 = stage_two_flops(codec_cfg, unet_cfg, 64, 64, 10)
    f2 = stage_two_flops(codec_cfg, unet_cfg, 64, 64, 20)
    assert f2 > f1
    assert f2 - f1 == 2 * 10 * unet_flops(unet_cfg, 16, 16)


def _tiny_models():
    seg = init_seg_params(SegTrainConfig(base_channels=4), 0)
    codec = init_codec(CodecConfig(base_channels=8), 0)
    unet_o = init_unet(UNetConfig(base_channels=4), 0)
    unet_g = init_unet(UNetConfig(base_channels=4), 1)
    return PipelineModels(seg=seg,
                          branches=BranchModels(optical=(codec, unet_o),
                                                geometric=(codec, unet_g)),
                          depth_range=codec.cfg.depth_range)


def test_bench_report_has_exactly_two_stage_entries(tmp_path):
    sample = generate_sample(1, SceneConfig(height=32, width=32))
    report = run_bench(_tiny_models(), sample, steps=3, repetitions=5, seed=0)
    d = report.to_dict()
    assert len(d["stages"]) == 2
    assert [s["stage"] for s in d["stages"]] == ["one", "two"]
    for st in d["stages"]:
        assert st["latency_ms"] >= 0
        assert st["gflops"] > 0
    from ditr.bench import write_bench_report

    write_bench_report(report, tmp_path / "bench.json")
    assert (tmp_path / "bench.json").exists()


def test_bench_latency_grows_with_steps():
    sample = generate_sample(1, SceneConfig(height=32, width=32))
    models = _tiny_models()
    fast = run_bench(models, sample, steps=2, repetitions=5, seed=0)
    slow = run_bench(models, sample, steps=16, repetitions=5, seed=0)
    assert slow.stages[1]["latency_ms"] > fast.stages[1]["latency_ms"]
    assert slow.stages[1]["gflops"] > fast.stages[1]["gflops"]


def test_bench_requires_five_repetitions():
    sample = generate_sample(1, SceneConfig(height=32, width=32))
    import pytest

    with pytest.raises(ValueError):
        run_bench(_tiny_models(), sample, steps=2, repetitions=3, seed=0)
