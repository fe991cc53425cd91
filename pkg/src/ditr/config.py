"""Line-based configuration files: ``key = value`` under ``[section]`` headers.

Sections map onto the stage configs; unknown keys are rejected so typos
fail loudly.  Example::

    [scene]
    height = 64
    width = 64
    p_drop = 0.5

    [segmenter]
    epochs = 120
    base_lr = 0.1

    [codec]
    quantize = false

    [diffusion]
    steps = 4000
    timesteps = 100
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from .codec import CodecConfig
from .diffusion import DiffusionTrainConfig, UNetConfig
from .segmenter import SegTrainConfig
from .synth import SceneConfig, scene_config_from_dict

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _convert(raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"not a boolean: '{raw}'")
    return target_type(raw)


def load_config(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser.read(path)
    return {section: dict(parser.items(section)) for section in parser.sections()}


def _build(dc_cls, section: dict, label: str):
    known = {f.name: f.type for f in fields(dc_cls)}
    defaults = dc_cls()
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"unknown [{label}] option '{key}'")
        current = getattr(defaults, key)
        kwargs[key] = _convert(raw, type(current))
    return dc_cls(**kwargs)


def scene_config(cfg: dict) -> SceneConfig:
    return scene_config_from_dict(cfg.get("scene", {}))


def segmenter_config(cfg: dict) -> SegTrainConfig:
    return _build(SegTrainConfig, cfg.get("segmenter", {}), "segmenter")


def codec_config(cfg: dict) -> CodecConfig:
    return _build(CodecConfig, cfg.get("codec", {}), "codec")


def diffusion_config(cfg: dict) -> DiffusionTrainConfig:
    section = dict(cfg.get("diffusion", {}))
    unet_keys = {f.name for f in fields(UNetConfig)}
    unet_section = {k: section.pop(k) for k in list(section) if k in unet_keys}
    base = _build(DiffusionTrainConfig, section, "diffusion")
    if unet_section:
        base.unet = _build(UNetConfig, unet_section, "diffusion")
    return base
