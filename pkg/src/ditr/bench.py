"""Latency and computational-cost benchmark, reported per pipeline stage.

Latency is the median wall clock over repeated runs (warm-up excluded).
FLOPs come from closed-form per-layer counts (a k x k convolution costs
2 k^2 Cin Cout OH OW; attention over n positions of width d costs
4 n d + 3 n on top of its projections), accumulated over the actual
architectures, so the estimate is deterministic for a fixed
configuration and resolution.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecConfig
from .diffusion import UNetConfig
from .segmenter import SegTrainConfig


def conv_flops(cin: int, cout: int, k: int, oh: int, ow: int) -> float:
    return 2.0 * k * k * cin * cout * oh * ow


def upconv_flops(cin: int, cout: int, h: int, w: int) -> float:
    return 2.0 * 4 * cin * cout * h * w


def attention_flops(n: int, d: int, query_dim: int) -> float:
    # q/k/v/out projections plus the score and mixing products
    proj = 2.0 * query_dim * d + 2 * (2.0 * d * d * n) + 2.0 * d * d
    return proj + 4.0 * n * d + 3.0 * n


def norm_flops(c: int, h: int, w: int) -> float:
    return 5.0 * c * h * w


def segnet_flops(c: int, h: int, w: int) -> float:
    total = conv_flops(4, c, 3, h, w) + conv_flops(c, c, 3, h, w)
    h2, w2 = h // 2, w // 2
    total += conv_flops(c, 2 * c, 3, h2, w2) + conv_flops(2 * c, 2 * c, 3, h2, w2)
    h3, w3 = h // 4, w // 4
    total += conv_flops(2 * c, 4 * c, 3, h3, w3) + conv_flops(4 * c, 4 * c, 3, h3, w3)
    h4, w4 = h // 8, w // 8
    total += conv_flops(4 * c, 8 * c, 3, h4, w4)
    total += upconv_flops(8 * c, 4 * c, h4, w4) + conv_flops(8 * c, 4 * c, 3, h3, w3)
    total += upconv_flops(4 * c, 2 * c, h3, w3) + conv_flops(4 * c, 2 * c, 3, h2, w2)
    total += upconv_flops(2 * c, c, h2, w2) + conv_flops(2 * c, c, 3, h, w)
    total += conv_flops(c, 1, 1, h, w)
    return total


def morphology_flops(h: int, w: int) -> float:
    # 7x7 median counts + three 5x5 dilation passes, one op per window cell
    return (49.0 + 3 * 25.0) * h * w


def codec_encode_flops(cfg: CodecConfig, h: int, w: int) -> float:
    c = cfg.base_channels
    h2, w2 = h // 2, w // 2
    h4, w4 = h // 4, w // 4
    total = conv_flops(1, 3, 4, h4, w4)  # pyramid detail projection
    total += conv_flops(1, c, 3, h2, w2) + norm_flops(c, h2, w2)
    total += conv_flops(c, c, 3, h2, w2) + attention_flops(h2 * w2, c, c)
    total += conv_flops(c, 2 * c, 3, h4, w4) + norm_flops(2 * c, h4, w4)
    total += conv_flops(2 * c, 2 * c, 3, h4, w4) + attention_flops(h4 * w4, 2 * c, 2 * c)
    total += conv_flops(2 * c, cfg.latent_channels - 1, 3, h4, w4)
    return total


def codec_decode_flops(cfg: CodecConfig, h: int, w: int) -> float:
    c = cfg.base_channels
    half = max(c // 2, 4)
    lat = cfg.latent_channels
    h2, w2 = h // 2, w // 2
    h4, w4 = h // 4, w // 4
    total = 0.0
    if cfg.quantize:
        total += 3.0 * lat * cfg.codebook_size * h4 * w4  # nearest-entry scan
    total += conv_flops(lat, 2 * c, 3, h4, w4) + norm_flops(2 * c, h4, w4)
    total += conv_flops(2 * c, 2 * c, 3, h4, w4) + attention_flops(h4 * w4, 2 * c, 2 * c)
    total += conv_flops(2 * c, 4 * c, 3, h4, w4) + norm_flops(c, h2, w2)
    total += conv_flops(c, c, 3, h2, w2) + attention_flops(h2 * w2, c, c)
    total += conv_flops(c, 4 * half, 3, h2, w2)
    total += conv_flops(half, half, 3, h, w) + conv_flops(half, 1, 3, h, w)
    return total


def unet_flops(cfg: UNetConfig, h: int, w: int) -> float:
    """One denoiser forward at latent resolution h x w."""
    c = cfg.base_channels
    cin = cfg.latent_channels + (cfg.cond_channels if cfg.concat_condition else 0)
    total = conv_flops(cin, c, 3, h, w) + norm_flops(c, h, w) + conv_flops(c, c, 3, h, w)
    total += 2.0 * cfg.emb_dim * c
    h2, w2 = h // 2, w // 2
    total += conv_flops(c, 2 * c, 3, h2, w2) + norm_flops(2 * c, h2, w2)
    total += conv_flops(2 * c, 2 * c, 3, h2, w2) + 2.0 * cfg.emb_dim * 2 * c
    h3, w3 = h // 4, w // 4
    total += conv_flops(2 * c, 4 * c, 3, h3, w3) + norm_flops(4 * c, h3, w3)
    total += conv_flops(4 * c, 4 * c, 3, h3, w3) + 2.0 * cfg.emb_dim * 4 * c
    h4, w4 = h // 8, w // 8
    total += conv_flops(4 * c, 8 * c, 3, h4, w4) + norm_flops(8 * c, h4, w4)
    total += conv_flops(8 * c, 8 * c, 3, h4, w4) + 2.0 * cfg.emb_dim * 8 * c
    total += conv_flops(8 * c, 8 * c, 1, h4, w4)
    total += attention_flops(h4 * w4, 8 * c, 8 * c)
    total += attention_flops(h4 * w4, 8 * c, cfg.cond_channels)
    total += upconv_flops(8 * c, 4 * c, h4, w4) + conv_flops(8 * c, 4 * c, 3, h3, w3)
    total += norm_flops(4 * c, h3, w3) + conv_flops(4 * c, 4 * c, 3, h3, w3)
    total += upconv_flops(4 * c, 2 * c, h3, w3) + conv_flops(4 * c, 2 * c, 3, h2, w2)
    total += norm_flops(2 * c, h2, w2) + conv_flops(2 * c, 2 * c, 3, h2, w2)
    total += upconv_flops(2 * c, c, h2, w2) + conv_flops(2 * c, c, 3, h, w)
    total += norm_flops(c, h, w) + conv_flops(c, c, 3, h, w)
    total += conv_flops(c, cfg.latent_channels, 3, h, w)
    return total


def feature_extractor_flops(h: int, w: int, stem_channels: int = 8) -> float:
    sobel = 2 * 18.0 * h * w  # two Sobel passes (RGB + depth)
    stem = conv_flops(3, stem_channels, 3, h // 2, w // 2)
    stem += conv_flops(stem_channels, stem_channels, 3, h // 4, w // 4)
    return sobel + stem


def stage_one_flops(seg_cfg: SegTrainConfig, h: int, w: int) -> float:
    return segnet_flops(seg_cfg.base_channels, h, w) + morphology_flops(h, w)


def stage_two_flops(codec_cfg: CodecConfig, unet_cfg: UNetConfig, h: int, w: int,
                    steps: int) -> float:
    lh, lw = h // 4, w // 4
    per_branch = (feature_extractor_flops(h, w)
                  + codec_encode_flops(codec_cfg, h, w)
                  + steps * unet_flops(unet_cfg, lh, lw)
                  + codec_decode_flops(codec_cfg, h, w))
    return 2.0 * per_branch


@dataclass
class BenchReport:
    resolution: tuple[int, int]
    repetitions: int
    diffusion_steps: int
    stages: list

    def to_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "repetitions": self.repetitions,
            "diffusion_steps": self.diffusion_steps,
            "stages": self.stages,
        }


def run_bench(models, sample, steps: int = 20, repetitions: int = 5,
              seed: int = 0) -> BenchReport:
    """Median per-stage latency on one sample plus analytic FLOPs."""
    from .diffusion import inpaint_batch, make_schedule
    from .segmenter import predict_region, refine_region

    if repetitions < 5:
        raise ValueError("need at least 5 repetitions")
    h, w = sample.raw.shape

    def time_stage(fn):
        fn()  # warm-up excluded from the statistics
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1000.0)
        return float(np.median(times))

    def stage_one():
        refine_region(predict_region(sample.rgb, sample.raw, models.seg))

    mask = refine_region(predict_region(sample.rgb, sample.raw, models.seg))
    sched = make_schedule(steps, 1e-3, 0.15)

    def stage_two():
        inpaint_batch(sample.raw[None], sample.rgb[None], mask[None],
                      models.branches, sched, seed, models.depth_range)

    lat1 = time_stage(stage_one)
    lat2 = time_stage(stage_two)

    seg_cfg = SegTrainConfig(base_channels=models.seg.base_channels)
    codec_cfg = models.branches.optical[0].cfg
    unet_cfg = models.branches.optical[1].cfg
    stages = [
        {"stage": "one", "latency_ms": lat1,
         "gflops": stage_one_flops(seg_cfg, h, w) / 1e9},
        {"stage": "two", "latency_ms": lat2,
         "gflops": stage_two_flops(codec_cfg, unet_cfg, h, w, steps) / 1e9},
    ]
    return BenchReport(resolution=(h, w), repetitions=repetitions,
                       diffusion_steps=steps, stages=stages)


def write_bench_report(report: BenchReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
