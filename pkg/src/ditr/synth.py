"""Synthetic RGB-D scene generator with exact ground truth.

Scenes are a textured background plane plus a few primitives (spheres,
boxes, camera-facing plane patches) with opaque, transparent, or
reflective (planar mirror) materials.  Ground-truth depth comes from
analytic ray casting; the corrupted "sensor" depth applies two physical
effects on top:

* optical corruption -- transparent pixels read the first solid surface
  behind the object (the IR signal passes through), mirror pixels read
  the virtual image (distance to the mirror plus mirror-to-object), and
  either kind may drop out to the missing sentinel;
* geometric corruption -- the depth sensor sits a baseline away from the
  RGB camera, so pixels occluded from the displaced viewpoint lose
  their readings (z-buffer forward warp).

Generation is pure: the same ``(seed, config)`` always produces the
same sample, bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .depthmap import DepthMap, Mask, Sample
from .rng import STREAM_DROPOUT, STREAM_SCENE, STREAM_TEXTURE, make_rng

MATERIAL_NAMES = {kernels.MAT_OPAQUE: "opaque", kernels.MAT_TRANSPARENT: "transparent",
                  kernels.MAT_REFLECTIVE: "reflective"}


class DegenerateSceneError(RuntimeError):
    """Raised when retries cannot produce a scene with a visible object."""


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 3
    p_opaque: float = 0.4
    p_transparent: float = 0.4
    p_reflective: float = 0.2
    depth_min: float = 0.6
    depth_max: float = 5.0
    bg_depth_min: float = 2.5
    bg_depth_max: float = 4.5
    focal_px: float | None = None  # fx = fy default: 1.25 * width
    baseline: float = 0.06
    p_drop: float = 0.5

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("scene size must be at least 8x8")
        probs = self.p_opaque + self.p_transparent + self.p_reflective
        if abs(probs - 1.0) > 1e-6:
            raise ValueError(f"material probabilities must sum to 1, got {probs}")
        if self.baseline < 0:
            raise ValueError("baseline must be non-negative")
        if self.focal_px is not None and self.focal_px <= 0:
            raise ValueError("focal length must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is invalid")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("dropout probability must be in [0, 1]")

    def intrinsics(self) -> tuple[float, float, float, float]:
        f = self.focal_px if self.focal_px is not None else 1.25 * self.width
        return f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def digest(self) -> str:
        blob = repr(sorted(self.__dict__.items())).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass(frozen=True)
class Primitive:
    ptype: int  # kernels.PRIM_*
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r,0,0); box: halves; rect: (hx,hy,0)
    material: int  # kernels.MAT_*


@dataclass(frozen=True)
class SceneInstance:
    prims: tuple[Primitive, ...]
    bg_depth: float
    texture_seed: int = 0

    def arrays(self):
        p = len(self.prims)
        types = np.empty(p, dtype=np.int64)
        params = np.zeros((p, 6), dtype=np.float64)
        mats = np.empty(p, dtype=np.int64)
        for i, prim in enumerate(self.prims):
            types[i] = prim.ptype
            params[i, :3] = prim.center
            params[i, 3:6] = prim.size
            mats[i] = prim.material
        return types, params, mats


def sample_scene(rng: np.random.Generator, cfg: SceneConfig) -> SceneInstance:
    """Draw a random scene whose every primitive crosses the view frustum."""
    fx, fy, cx, cy = cfg.intrinsics()
    bg = float(rng.uniform(cfg.bg_depth_min, cfg.bg_depth_max))
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    probs = (cfg.p_opaque, cfg.p_transparent, cfg.p_reflective)
    prims = []
    for _ in range(count):
        material = int(rng.choice(3, p=probs))
        if material == kernels.MAT_REFLECTIVE:
            ptype = kernels.PRIM_RECT  # mirrors are planar so virtual depth is closed-form
        else:
            ptype = int(rng.choice((kernels.PRIM_SPHERE, kernels.PRIM_BOX, kernels.PRIM_RECT)))
        # anchor the primitive on a ray through an interior pixel so it is visible
        u = rng.uniform(0.2 * cfg.width, 0.8 * cfg.width)
        v = rng.uniform(0.2 * cfg.height, 0.8 * cfg.height)
        z = float(rng.uniform(cfg.depth_min, 0.75 * bg))
        center = (z * (u - cx) / fx, z * (v - cy) / fy, z)
        # sizes chosen as an angular extent so projected size is scale-free
        half_px = rng.uniform(0.09, 0.20) * cfg.width
        half = float(z * half_px / fx)
        if ptype == kernels.PRIM_SPHERE:
            size = (half, 0.0, 0.0)
        elif ptype == kernels.PRIM_BOX:
            size = (half, float(rng.uniform(0.6, 1.4)) * half, 0.7 * half)
        else:
            size = (half, float(rng.uniform(0.6, 1.4)) * half, 0.0)
        prims.append(Primitive(ptype, center, size, material))
    texture_seed = int(rng.integers(0, 2**31 - 1))
    return SceneInstance(tuple(prims), bg, texture_seed)


def _cast(instance: SceneInstance, cfg: SceneConfig):
    fx, fy, cx, cy = cfg.intrinsics()
    types, params, mats = instance.arrays()
    return kernels.raycast(cfg.height, cfg.width, fx, fy, cx, cy,
                           types, params, mats, instance.bg_depth)


def _optical_values(instance: SceneInstance, cast) -> tuple[np.ndarray, Mask]:
    """Sensor reading for optically corrupted pixels, before dropout."""
    first_t, first_id, cont_t, _, refl_t, _ = cast
    _, _, mats = instance.arrays()
    mats_ext = np.concatenate([mats, [kernels.MAT_OPAQUE]])  # background row
    pix_mat = mats_ext[first_id]
    transparent = pix_mat == kernels.MAT_TRANSPARENT
    reflective = pix_mat == kernels.MAT_REFLECTIVE
    values = first_t.copy()
    values[transparent] = cont_t[transparent]
    values[reflective] = refl_t[reflective]  # 0 where the bounce hit nothing
    return values, transparent | reflective


def corrupt_optical(gt: DepthMap, instance: SceneInstance, cfg: SceneConfig,
                    rng: np.random.Generator | None = None) -> DepthMap:
    """Replace readings on transparent/reflective pixels with what the IR
    signal actually sees; other pixels are untouched."""
    cast = _cast(instance, cfg)
    values, optical = _optical_values(instance, cast)
    out = np.asarray(gt, dtype=np.float32).copy()
    out[optical] = values[optical].astype(np.float32)
    if cfg.p_drop > 0:
        rng = rng if rng is not None else make_rng(0, STREAM_DROPOUT)
        drop = rng.random((cfg.height, cfg.width)) < cfg.p_drop
        out[optical & drop] = 0.0
    return out


def corrupt_geometric(depth: DepthMap, fx: float, baseline: float) -> tuple[DepthMap, Mask]:
    """Zero out pixels occluded from a sensor displaced ``baseline`` along x.

    Surviving pixels keep their exact values; the returned mask marks the
    newly created holes (previously valid pixels that lost their reading).
    """
    if fx <= 0:
        raise ValueError(f"focal length must be positive, got {fx}")
    if baseline < 0:
        raise ValueError(f"baseline must be non-negative, got {baseline}")
    depth = np.asarray(depth, dtype=np.float32)
    survivors = kernels.warp_survivors(depth, float(fx), float(baseline))
    out = np.where(survivors, depth, np.float32(0.0))
    holes = ~survivors & (depth > 0)
    return out, holes


def _value_noise(rng: np.random.Generator, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear value noise over a tiled 8x8 random lattice."""
    lattice = rng.random((9, 9))
    lattice[8, :] = lattice[0, :]
    lattice[:, 8] = lattice[:, 0]
    ui = np.floor(u).astype(np.int64)
    vi = np.floor(v).astype(np.int64)
    uf = u - ui
    vf = v - vi
    ui %= 8
    vi %= 8
    n00 = lattice[vi, ui]
    n01 = lattice[vi, ui + 1]
    n10 = lattice[vi + 1, ui]
    n11 = lattice[vi + 1, ui + 1]
    return (n00 * (1 - uf) + n01 * uf) * (1 - vf) + (n10 * (1 - uf) + n11 * uf) * vf


def _surface_color(instance: SceneInstance, cfg: SceneConfig, prim_id: np.ndarray,
                   px: np.ndarray, py: np.ndarray, pz: np.ndarray) -> np.ndarray:
    """Shaded, textured albedo for given surface points, shape (H, W, 3)."""
    h, w = prim_id.shape
    out = np.zeros((h, w, 3), dtype=np.float64)
    light = np.array([0.4, -0.6, 0.7])
    light = light / np.linalg.norm(light)
    ids = [int(i) for i in np.unique(prim_id)]
    for pid in ids:
        sel = prim_id == pid
        rng = make_rng(instance.texture_seed, STREAM_TEXTURE, pid + 1)
        base = rng.uniform(0.15, 1.0, size=3)
        freq = rng.uniform(0.7, 1.5)
        noise = _value_noise(rng, px[sel] * freq, py[sel] * freq)
        if pid < 0:  # background plane faces the camera
            nz = np.full(sel.sum(), -1.0)
            lambert = np.maximum(0.0, -nz * light[2])
        else:
            prim = instance.prims[pid]
            c = np.array(prim.center)
            if prim.ptype == kernels.PRIM_SPHERE:
                n = np.stack([px[sel] - c[0], py[sel] - c[1], pz[sel] - c[2]], axis=-1)
                n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-9)
            elif prim.ptype == kernels.PRIM_BOX:
                rel = np.stack(
                    [(px[sel] - c[0]) / max(prim.size[0], 1e-9),
                     (py[sel] - c[1]) / max(prim.size[1], 1e-9),
                     (pz[sel] - c[2]) / max(prim.size[2], 1e-9)], axis=-1)
                axis = np.abs(rel).argmax(axis=-1)
                n = np.zeros_like(rel)
                n[np.arange(len(axis)), axis] = np.sign(rel[np.arange(len(axis)), axis])
            else:
                n = np.zeros((sel.sum(), 3))
                n[:, 2] = -1.0
            lambert = np.maximum(0.0, -(n @ light))
        shade = (0.55 + 0.45 * lambert) * (0.85 + 0.15 * noise)
        out[sel] = base[None, :] * shade[:, None]
    return out


def render_rgb(instance: SceneInstance, cfg: SceneConfig, cast=None) -> np.ndarray:
    """Flat-shaded, noise-textured rendering; transparent objects blend with
    what lies behind them, mirrors blend with their reflected view."""
    if cast is None:
        cast = _cast(instance, cfg)
    first_t, first_id, cont_t, cont_id, refl_t, refl_id = cast
    fx, fy, cx, cy = cfg.intrinsics()
    jj = (np.arange(cfg.width) - cx) / fx
    ii = (np.arange(cfg.height) - cy) / fy
    dx = np.broadcast_to(jj[None, :], first_t.shape)
    dy = np.broadcast_to(ii[:, None], first_t.shape)

    color = _surface_color(instance, cfg, first_id, first_t * dx, first_t * dy, first_t)
    _, _, mats = instance.arrays()
    mats_ext = np.concatenate([mats, [kernels.MAT_OPAQUE]])
    pix_mat = mats_ext[first_id]

    transparent = pix_mat == kernels.MAT_TRANSPARENT
    if transparent.any():
        behind = _surface_color(instance, cfg, cont_id, cont_t * dx, cont_t * dy, cont_t)
        color[transparent] = 0.45 * color[transparent] + 0.55 * behind[transparent]

    reflective = pix_mat == kernels.MAT_REFLECTIVE
    bounced = reflective & (refl_id >= 0)
    if bounced.any():
        tb = refl_t - first_t  # parameter along the reflected ray
        rx = first_t * dx + tb * dx
        ry = first_t * dy + tb * dy
        rz = first_t - tb
        seen = _surface_color(instance, cfg, refl_id, rx, ry, rz)
        color[bounced] = 0.35 * color[bounced] + 0.65 * seen[bounced]
    dark = reflective & (refl_id < 0)
    color[dark] *= 0.5

    return np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)


def generate_sample(seed: int, cfg: SceneConfig) -> Sample:
    """Deterministic sample: exact ground truth plus corrupted sensor depth."""
    instance = None
    cast = None
    for attempt in range(8):
        rng = make_rng(seed, STREAM_SCENE, attempt)
        candidate = sample_scene(rng, cfg)
        cast = _cast(candidate, cfg)
        if not candidate.prims or (cast[1] >= 0).any():
            instance = candidate
            break
    if instance is None:
        raise DegenerateSceneError(f"no visible object after 8 retries (seed {seed})")

    gt = cast[0].astype(np.float32)
    values, optical = _optical_values(instance, cast)
    raw0 = gt.copy()
    raw0[optical] = values[optical].astype(np.float32)
    if cfg.p_drop > 0:
        drop = make_rng(seed, STREAM_DROPOUT).random(gt.shape) < cfg.p_drop
        raw0[optical & drop] = 0.0
    fx = cfg.intrinsics()[0]
    raw, _ = corrupt_geometric(raw0, fx, cfg.baseline)
    rgb = render_rgb(instance, cfg, cast)
    meta = {"seed": int(seed), "config_digest": cfg.digest()}
    return Sample(rgb=rgb, raw=raw, gt=gt, optical_gt=optical, meta=meta)


def generate_corpus(count: int, base_seed: int, cfg: SceneConfig) -> list[Sample]:
    """``count`` independent samples with per-index derived seeds."""
    return [generate_sample(base_seed + 1000 * i, cfg) for i in range(count)]


def scene_config_from_dict(d: dict) -> SceneConfig:
    cfg = SceneConfig()
    fields = {k: type(getattr(cfg, k)) for k in cfg.__dict__}
    kwargs = {}
    for key, raw in d.items():
        if key not in fields:
            raise ValueError(f"unknown scene option '{key}'")
        cur = getattr(cfg, key)
        kwargs[key] = type(cur)(raw) if cur is not None else float(raw)
    return replace(cfg, **kwargs)
