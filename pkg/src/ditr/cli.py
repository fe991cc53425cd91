"""Command-line interface.

    ditr synth       generate a synthetic RGB-D corpus with ground truth
    ditr train-seg   train (and optionally fine-tune) the region proposer
    ditr train-codec train the depth latent codec
    ditr train-diff  train one diffusion branch (optical or geometric)
    ditr infer       restore depth maps end to end
    ditr eval        restore + score + write reports (supports ablations)
    ditr bench       per-stage latency / FLOP report

Global flags: ``--config FILE`` (key = value sections), ``--seed``,
``--verbose``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("ditr")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ditr", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="key = value config file with [section] headers")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_parse_size, default=None)

    p = sub.add_parser("train-seg", help="train the region proposal stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--codec", help="with --unet-*: fine-tune against a frozen stage two")
    p.add_argument("--unet-opt")
    p.add_argument("--unet-geo")
    p.add_argument("--steps", type=int, default=50, help="diffusion steps for fine-tune targets")

    p = sub.add_parser("train-codec", help="train the depth latent codec")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("train-diff", help="train one diffusion branch")
    p.add_argument("--branch", choices=("optical", "geometric"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="optimizer steps")

    for name in ("infer", "eval"):
        p = sub.add_parser(name, help="run the full pipeline" +
                           (" and write metric reports" if name == "eval" else ""))
        p.add_argument("--in", dest="data", required=True)
        p.add_argument("--seg", required=True)
        p.add_argument("--codec", required=True)
        p.add_argument("--unet-opt", required=True)
        p.add_argument("--unet-geo", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=100, help="diffusion steps")
        p.add_argument("--limit", type=int, default=None)
        p.add_argument("--dump-boundaries", default=None)
        if name == "eval":
            p.add_argument("--ablate", choices=("none", "no-refine", "no-partition"),
                           default="none")

    p = sub.add_parser("bench", help="latency / FLOP benchmark")
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", default=None)
    p.add_argument("--seg")
    p.add_argument("--codec")
    p.add_argument("--unet-opt")
    p.add_argument("--unet-geo")
    return ap


def _load_cfg(args):
    from .config import load_config

    return load_config(args.config) if args.config else {}


def cmd_synth(args) -> int:
    from .config import scene_config
    from .depthmap import save_sample, write_manifest
    from .synth import generate_sample

    cfg = scene_config(_load_cfg(args))
    if args.size is not None:
        cfg = dataclasses.replace(cfg, height=args.size[0], width=args.size[1])
    entries = []
    for i in range(args.count):
        seed = args.seed + 1000 * i
        sample = generate_sample(seed, cfg)
        stem = f"sample_{i:05d}"
        save_sample(args.out, stem, sample)
        entries.append((stem, seed))
    write_manifest(args.out, entries)
    log.info("wrote %d samples to %s", args.count, args.out)
    return 0


def _load_corpus(data_dir):
    from .depthmap import load_sample, read_manifest

    entries = read_manifest(data_dir)
    return [load_sample(data_dir, stem) for stem, _ in entries]


def cmd_train_seg(args) -> int:
    from .config import segmenter_config
    from .pipeline import PipelineModels, make_frozen_inpainter
    from .segmenter import finetune_joint, save_seg_checkpoint, train_segmenter

    cfg = segmenter_config(_load_cfg(args))
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    corpus = _load_corpus(args.data)
    params = train_segmenter(corpus, cfg, args.seed)
    log.info("trained segmenter: final BCE %.4f", params.history[-1]["bce"])
    if args.codec and args.unet_opt and args.unet_geo:
        save_seg_checkpoint(args.out, params)  # frozen stage two reads stage one
        models = PipelineModels.load(args.out, args.codec, args.unet_opt, args.unet_geo)
        models.seg = params
        frozen = make_frozen_inpainter(corpus, models, args.steps, args.seed)
        params = finetune_joint(params, frozen, corpus, cfg, args.seed)
        log.info("fine-tuned segmenter: final loss %.4f", params.history[-1]["loss"])
    save_seg_checkpoint(args.out, params)
    return 0


def cmd_train_codec(args) -> int:
    from .codec import save_codec_checkpoint, train_codec
    from .config import codec_config

    cfg = codec_config(_load_cfg(args))
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    corpus = _load_corpus(args.data)
    params = train_codec([s.gt for s in corpus], cfg, args.seed)
    save_codec_checkpoint(args.out, params)
    log.info("trained codec: final MSE %.5f", params.history[-1]["mse"])
    return 0


def cmd_train_diff(args) -> int:
    from .boundary import build_condition
    from .codec import encode_batch, load_codec_checkpoint
    from .config import diffusion_config
    from .diffusion import save_unet_checkpoint, train_diffusion

    cfg = diffusion_config(_load_cfg(args))
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    corpus = _load_corpus(args.data)
    codec = load_codec_checkpoint(args.codec)
    gts = np.stack([s.gt for s in corpus])
    latents = encode_batch(gts, codec)
    feats = np.stack([build_condition(s.rgb, s.raw, args.branch, codec.cfg.depth_range)
                      for s in corpus])
    params = train_diffusion(latents, feats, cfg, args.seed)
    save_unet_checkpoint(args.out, params)
    log.info("trained %s branch: final loss %.4f", args.branch, params.history[-1]["loss"])
    return 0


def cmd_infer(args) -> int:
    from .depthmap import read_manifest, save_depth_png, save_mask_png
    from .pipeline import PipelineModels, restore_samples

    models = PipelineModels.load(args.seg, args.codec, args.unet_opt, args.unet_geo)
    entries = read_manifest(args.data)
    if args.limit is not None:
        entries = entries[: args.limit]
    from .depthmap import load_sample

    samples = [load_sample(args.data, stem) for stem, _ in entries]
    if args.dump_boundaries:
        from .pipeline import _dump_boundaries

        _dump_boundaries(samples, args.dump_boundaries)
    preds, masks = restore_samples(samples, models, args.steps, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (stem, _), pred, mask in zip(entries, preds, masks):
        units = np.clip(np.rint(pred / 0.001), 0, 65535).astype(np.uint16)
        save_depth_png(out / f"{stem}_depth_pred.png", units)
        save_mask_png(out / f"{stem}_mask_pred.png", mask)
    log.info("restored %d samples into %s", len(samples), args.out)
    return 0


def cmd_eval(args) -> int:
    from .pipeline import PipelineModels, run_pipeline

    models = PipelineModels.load(args.seg, args.codec, args.unet_opt, args.unet_geo)
    body = run_pipeline(args.data, models, args.out, steps=args.steps, seed=args.seed,
                        ablate=args.ablate, limit=args.limit,
                        dump_boundaries=args.dump_boundaries)
    overall = body["aggregate"]["overall"]
    log.info("overall RMSE %.4f MAE %.4f REL %.4f", overall["rmse"], overall["mae"],
             overall["rel"])
    print(json.dumps({"overall": overall}, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench, write_bench_report
    from .synth import SceneConfig, generate_sample

    h, w = args.size
    if h % 32 or w % 32:
        raise SystemExit(f"bench size must be divisible by 32, got {h}x{w}")
    sample = generate_sample(args.seed, SceneConfig(height=h, width=w))
    models = _bench_models(args, h, w)
    report = run_bench(models, sample, steps=args.steps, repetitions=args.reps,
                       seed=args.seed)
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if args.out:
        write_bench_report(report, args.out)
    return 0


def _bench_models(args, h, w):
    from .pipeline import PipelineModels

    if args.seg and args.codec and args.unet_opt and args.unet_geo:
        return PipelineModels.load(args.seg, args.codec, args.unet_opt, args.unet_geo)
    # untrained models measure the same compute as trained ones
    from .codec import CodecConfig, init_codec
    from .diffusion import BranchModels, UNetConfig, init_unet
    from .segmenter import SegTrainConfig, init_seg_params

    seg = init_seg_params(SegTrainConfig(), args.seed)
    codec = init_codec(CodecConfig(), args.seed)
    unet_o = init_unet(UNetConfig(), args.seed)
    unet_g = init_unet(UNetConfig(), args.seed + 1)
    return PipelineModels(seg=seg,
                          branches=BranchModels(optical=(codec, unet_o),
                                                geometric=(codec, unet_g)),
                          depth_range=codec.cfg.depth_range)


COMMANDS = {
    "synth": cmd_synth,
    "train-seg": cmd_train_seg,
    "train-codec": cmd_train_codec,
    "train-diff": cmd_train_diff,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
