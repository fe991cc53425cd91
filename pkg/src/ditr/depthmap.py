"""Depth/RGB/mask data model, mask algebra, and PNG sample I/O.

Conventions: depth maps are float32 arrays of metric depth in meters
with 0.0 as the missing-value sentinel; RGB images are uint8 ``HxWx3``;
masks are boolean ``HxW``.  On disk a sample is four PNGs sharing a stem:
``<stem>_rgb.png`` (8-bit RGB), ``<stem>_depth_raw.png`` and
``<stem>_depth_gt.png`` (16-bit grayscale), and ``<stem>_mask.png``
(8-bit grayscale, 0 = background, 255 = optically corrupted region).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DepthMap = np.ndarray  # float32 HxW, meters, 0.0 = missing
RgbImage = np.ndarray  # uint8 HxWx3
Mask = np.ndarray  # bool HxW

SUFFIXES = {
    "rgb": "_rgb.png",
    "raw": "_depth_raw.png",
    "gt": "_depth_gt.png",
    "mask": "_mask.png",
}


class SampleIOError(ValueError):
    """Raised for unreadable, malformed, or inconsistent sample files."""


def as_depth(arr) -> DepthMap:
    d = np.asarray(arr, dtype=np.float32)
    if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
        raise ValueError(f"depth map must be 2D and non-empty, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or (d < 0).any():
        raise ValueError("depth map must be finite and non-negative")
    return d


def as_mask(arr) -> Mask:
    m = np.asarray(arr)
    if m.dtype != np.bool_:
        m = m.astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    return m


def _check_same_shape(what: str, a, b) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"{what}: grid shapes differ, {a.shape[:2]} vs {b.shape[:2]}")


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint optical/geometric split of the pixel domain plus hole mask.

    ``optical`` marks pixels whose readings are optically corrupted,
    ``geometric`` is its exact complement, and ``holes`` are the missing
    (zero-depth) pixels inside the geometric region.
    """

    optical: Mask
    geometric: Mask
    holes: Mask

    def __post_init__(self):
        _check_same_shape("partition", self.optical, self.geometric)
        _check_same_shape("partition", self.optical, self.holes)
        if np.any(self.optical & self.geometric):
            raise ValueError("optical and geometric regions overlap")
        if not np.all(self.optical | self.geometric):
            raise ValueError("optical and geometric regions do not cover the image")
        if np.any(self.holes & ~self.geometric):
            raise ValueError("holes must lie inside the geometric region")


@dataclass
class Sample:
    """One RGB-D record: image, corrupted depth, ground truth, optical label."""

    rgb: RgbImage
    raw: DepthMap
    gt: DepthMap
    optical_gt: Mask
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_same_shape("sample", self.rgb, self.raw)
        _check_same_shape("sample", self.raw, self.gt)
        _check_same_shape("sample", self.raw, self.optical_gt)


def valid_mask(depth: DepthMap) -> Mask:
    """True exactly where a depth reading exists (value > 0)."""
    return depth > 0


def nearest_valid_fill(depth: DepthMap, invalid: Mask | None = None) -> DepthMap:
    """Fill each invalid pixel with the value of the Euclidean-nearest valid one.

    Default invalid set: missing pixels (depth == 0).  Requires at least
    one valid pixel.
    """
    from scipy import ndimage

    depth = np.asarray(depth, dtype=np.float32)
    invalid = (depth == 0) if invalid is None else as_mask(invalid)
    _check_same_shape("nearest_valid_fill", depth, invalid)
    if not invalid.any():
        return depth.copy()
    if invalid.all():
        raise ValueError("cannot fill: no valid pixel to copy from")
    idx = ndimage.distance_transform_edt(invalid, return_distances=False, return_indices=True)
    return depth[tuple(idx)]


def partition(optical_mask: Mask, depth: DepthMap) -> RegionPartition:
    """Split the pixel domain by the optical mask; holes are missing pixels
    within the geometric remainder."""
    optical_mask = as_mask(optical_mask)
    _check_same_shape("partition", optical_mask, depth)
    geometric = ~optical_mask
    holes = (depth == 0) & geometric
    return RegionPartition(optical=optical_mask.copy(), geometric=geometric, holes=holes)


def mask_combine(a: Mask, b: Mask | None, op: str) -> Mask:
    """Pointwise boolean algebra; complement is w.r.t. the full pixel domain."""
    a = as_mask(a)
    if op == "complement":
        return ~a
    b = as_mask(b)
    _check_same_shape("mask_combine", a, b)
    if op == "union":
        return a | b
    if op == "intersect":
        return a & b
    if op == "difference":
        return a & ~b
    raise ValueError(f"unknown mask op '{op}'")


# -- PNG I/O ------------------------------------------------------------------


def save_depth_png(path, depth_units: np.ndarray) -> None:
    """Write raw 16-bit depth units (not meters) as grayscale PNG."""
    arr = np.asarray(depth_units)
    if arr.dtype != np.uint16:
        raise SampleIOError(f"depth PNG wants uint16 units, got {arr.dtype}")
    Image.fromarray(arr).save(path)  # uint16 maps to 16-bit grayscale


def load_depth_png(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise SampleIOError(f"cannot read depth PNG {path}: {exc}") from exc
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise SampleIOError(f"{path}: expected 16-bit grayscale PNG, got mode '{img.mode}'")
    return np.asarray(img, dtype=np.uint16)


def save_rgb_png(path, rgb: RgbImage) -> None:
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise SampleIOError(f"RGB PNG wants uint8 HxWx3, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb_png(path) -> RgbImage:
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise SampleIOError(f"cannot read RGB PNG {path}: {exc}") from exc
    if img.mode != "RGB":
        raise SampleIOError(f"{path}: expected 8-bit RGB PNG, got mode '{img.mode}'")
    return np.asarray(img, dtype=np.uint8)


def save_mask_png(path, mask: Mask) -> None:
    arr = np.where(as_mask(mask), np.uint8(255), np.uint8(0))
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path) -> Mask:
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise SampleIOError(f"cannot read mask PNG {path}: {exc}") from exc
    if img.mode != "L":
        raise SampleIOError(f"{path}: expected 8-bit grayscale mask PNG, got mode '{img.mode}'")
    return np.asarray(img) > 127


def sample_paths(directory, stem: str) -> dict[str, Path]:
    directory = Path(directory)
    return {key: directory / f"{stem}{suffix}" for key, suffix in SUFFIXES.items()}


def load_sample(directory, stem: str, depth_scale: float = 0.001) -> Sample:
    """Read one sample; depth units become meters via ``depth_scale``."""
    paths = sample_paths(directory, stem)
    rgb = load_rgb_png(paths["rgb"])
    raw_units = load_depth_png(paths["raw"])
    gt_units = load_depth_png(paths["gt"])
    mask = load_mask_png(paths["mask"])
    for name, arr in (("raw depth", raw_units), ("gt depth", gt_units), ("mask", mask)):
        if arr.shape[:2] != rgb.shape[:2]:
            raise SampleIOError(
                f"{stem}: {name} is {arr.shape[:2]} but RGB is {rgb.shape[:2]}"
            )
    raw = raw_units.astype(np.float32) * np.float32(depth_scale)
    gt = gt_units.astype(np.float32) * np.float32(depth_scale)
    return Sample(rgb=rgb, raw=raw, gt=gt, optical_gt=mask, meta={"stem": stem})


def save_sample(directory, stem: str, sample: Sample, depth_scale: float = 0.001) -> None:
    """Write one sample; meters are quantized to 16-bit units of ``depth_scale``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = sample_paths(directory, stem)
    save_rgb_png(paths["rgb"], sample.rgb)
    for key, depth in (("raw", sample.raw), ("gt", sample.gt)):
        units = np.clip(np.rint(depth / depth_scale), 0, 65535).astype(np.uint16)
        save_depth_png(paths[key], units)
    save_mask_png(paths["mask"], sample.optical_gt)


def read_manifest(directory) -> list[tuple[str, int]]:
    """(stem, seed) pairs from a corpus manifest file."""
    lines = (Path(directory) / "manifest.txt").read_text().splitlines()
    out = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        stem, seed = line.split()
        out.append((stem, int(seed)))
    return out


def write_manifest(directory, entries: list[tuple[str, int]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    body = "".join(f"{stem} {seed}\n" for stem, seed in entries)
    (directory / "manifest.txt").write_text(body)
