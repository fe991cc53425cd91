"""Depth inpainting for transparent and reflective objects.

Two-stage pipeline: a region-proposal segmenter locates pixels whose
depth readings are optically corrupted (IR passing through transparent
objects or bouncing off mirrors), then two latent-diffusion branches
restore the image: one re-estimates depth inside the proposed region,
the other fills parallax occlusion holes in the rest of the map.

The package is self-contained: it ships a synthetic RGB-D scene
simulator with exact ground truth, a minimal reverse-mode autodiff
engine the networks train on, depth metrics, and a CLI (``ditr``).
"""

__version__ = "0.1.0"

from .depthmap import DepthMap, Mask, RegionPartition, RgbImage, Sample  # noqa: F401
