"""Boundary maps and conditioning features for the diffusion branches.

``extract_boundaries`` finds object edges with a Sobel detector plus
one-pass non-maximum thinning; it works on RGB (via luma) and on depth
maps (missing pixels are excluded from gradient support).  The
depth-aware map keeps only RGB boundaries confirmed by a depth boundary
nearby, which separates real object outlines from texture edges.

``build_condition`` assembles the per-branch feature map consumed by the
denoising network: one boundary channel (depth-aware for the optical
branch, plain RGB boundaries for the geometric branch), coarse RGB
features from a small fixed conv stem, and the normalized raw depth,
all at quarter resolution.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .depthmap import Mask, nearest_valid_fill
from .rng import make_rng

BoundaryMap = np.ndarray  # bool HxW

RGB_TAU_REL = 0.1  # fraction of the image's max gradient magnitude
DEPTH_TAU = 0.05  # meters per pixel
DA_RADIUS = 2  # tolerance dilation of depth boundaries, in pixels

_STEM_SEED = 0xD17B07  # fixed stem weights: untrained but deterministic
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 4.0

# (di, dj) comparison axis per gradient-direction bin
_NMS_DIRS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _sobel(gray: np.ndarray):
    """Gradient components normalized to value-per-pixel units."""
    padded = np.pad(gray, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = (win * _SOBEL_X).sum(axis=(-2, -1))
    gy = (win * _SOBEL_X.T).sum(axis=(-2, -1))
    return gx, gy


def _thin(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray, tau: float) -> BoundaryMap:
    """One-pass non-maximum suppression along the gradient direction.

    Ties keep the earlier pixel along the comparison axis (strict test
    against the previous neighbor, non-strict against the next), so a
    two-pixel-wide plateau thins to a single line.
    """
    h, w = mag.shape
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    sector = np.floor_divide(np.mod(ang + np.pi / 8, np.pi), np.pi / 4).astype(np.int64)
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros((h, w), dtype=bool)
    for s, (di, dj) in enumerate(_NMS_DIRS):
        nxt = padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
        prv = padded[1 - di : 1 - di + h, 1 - dj : 1 - dj + w]
        keep |= (sector == s) & (mag > prv) & (mag >= nxt)
    return keep & (mag > tau)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma in [0, 1]."""
    f = rgb.astype(np.float64) / 255.0
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


def extract_boundaries(grid: np.ndarray, threshold: float | None = None) -> BoundaryMap:
    """Thresholded, thinned Sobel edges of an RGB image or a depth map.

    RGB default threshold: ``RGB_TAU_REL`` of the max gradient magnitude.
    Depth default: ``DEPTH_TAU`` meters/pixel, with missing-depth pixels
    excluded from gradient support.
    """
    if threshold is not None and threshold <= 0:
        raise ValueError(f"boundary threshold must be positive, got {threshold}")
    if grid.ndim == 3:
        gx, gy = _sobel(rgb_to_gray(grid))
        mag = np.hypot(gx, gy)
        tau = threshold if threshold is not None else RGB_TAU_REL * float(mag.max())
        if tau == 0.0:  # constant image: no gradient anywhere
            return np.zeros(mag.shape, dtype=bool)
    elif grid.ndim == 2:
        depth = np.asarray(grid, dtype=np.float64)
        missing = depth <= 0
        if missing.all():
            return np.zeros(depth.shape, dtype=bool)
        if missing.any():
            # missing pixels carry no signal: bridge them with the nearest
            # reading so they neither fake a step nor mask a real one
            depth = nearest_valid_fill(depth.astype(np.float32)).astype(np.float64)
        gx, gy = _sobel(depth)
        mag = np.hypot(gx, gy)
        mag[missing] = 0.0  # boundaries live on measured pixels only
        tau = threshold if threshold is not None else DEPTH_TAU
    else:
        raise ValueError(f"expected HxW depth or HxWx3 RGB, got shape {grid.shape}")
    return _thin(mag, gx, gy, tau)


def _dilate_square(mask: Mask, radius: int) -> Mask:
    if radius <= 0:
        return mask
    padded = np.pad(mask.astype(np.int64), radius, mode="constant")
    h, w = mask.shape
    k = 2 * radius + 1
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    count = ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]
    return count[:h, :w] >= 1


def depth_aware_map(m_rgb: BoundaryMap, m_d: BoundaryMap, dilate_r: int = DA_RADIUS) -> BoundaryMap:
    """RGB boundaries confirmed by a depth boundary within ``dilate_r`` pixels.

    With ``dilate_r=0`` this is the plain intersection of the two maps;
    the tolerance radius absorbs registration noise in the depth edges.
    """
    if m_rgb.shape != m_d.shape:
        raise ValueError(f"boundary map shapes differ: {m_rgb.shape} vs {m_d.shape}")
    return m_rgb & _dilate_square(m_d, dilate_r)


_STEM_CACHE: dict[int, tuple[np.ndarray, ...]] = {}


def _stem_weights(channels: int = 8):
    if channels not in _STEM_CACHE:
        rng = make_rng(_STEM_SEED, channels)
        w1 = (rng.standard_normal((channels, 3, 3, 3)) * np.sqrt(2.0 / 27)).astype(np.float32)
        w2 = (rng.standard_normal((channels, channels, 3, 3)) * np.sqrt(2.0 / (9 * channels))).astype(np.float32)
        _STEM_CACHE[channels] = (w1, w2)
    return _STEM_CACHE[channels]


def _pool(arr: np.ndarray, k: int, how: str) -> np.ndarray:
    h, w = arr.shape
    blocks = arr.reshape(h // k, k, w // k, k)
    return blocks.max(axis=(1, 3)) if how == "max" else blocks.mean(axis=(1, 3))


def build_condition(rgb: np.ndarray, depth: np.ndarray, branch: str,
                    depth_range: float = 5.0) -> np.ndarray:
    """Conditioning feature map for one diffusion branch, (10, H/4, W/4).

    Channel 0 is the branch's boundary map max-pooled to quarter
    resolution, channels 1-8 come from the fixed RGB stem, channel 9 is
    the raw depth clipped to [0, 1] by ``depth_range`` and average-pooled.
    """
    h, w = depth.shape
    if h % 4 or w % 4:
        raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
    if branch == "optical":
        edge = depth_aware_map(extract_boundaries(rgb), extract_boundaries(depth))
    elif branch == "geometric":
        edge = extract_boundaries(rgb)
    else:
        raise ValueError(f"branch must be 'optical' or 'geometric', got '{branch}'")
    edge_q = _pool(edge.astype(np.float32), 4, "max")

    w1, w2 = _stem_weights()
    x = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    f = kernels.conv2d_fwd(xp, w1, 2)
    f = np.maximum(f, 0.0)
    fp = np.pad(f, ((0, 0), (0, 0), (1, 1), (1, 1)))
    f = np.maximum(kernels.conv2d_fwd(fp, w2, 2), 0.0)[0]

    # valid-weighted block mean: missing pixels must not drag cells to zero
    dn = np.clip(depth / depth_range, 0.0, 1.0).astype(np.float32)
    valid = (depth > 0).astype(np.float32)
    num = _pool(dn * valid, 4, "mean")
    den = _pool(valid, 4, "mean")
    depth_q = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.concatenate([edge_q[None], f, depth_q[None]], axis=0).astype(np.float32)
