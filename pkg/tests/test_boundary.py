"""Boundary extraction, depth-aware combination, and conditioning features."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from ditr.boundary import build_condition, depth_aware_map, extract_boundaries
from ditr.synth import SceneConfig, generate_sample


def test_constant_image_has_no_boundaries():
    rgb = np.full((16, 16, 3), 180, np.uint8)
    assert not extract_boundaries(rgb).any()
    depth = np.full((16, 16), 2.0, np.float32)
    assert not extract_boundaries(depth).any()


def test_vertical_step_thins_to_single_line():
    img = np.zeros((20, 20, 3), np.uint8)
    img[:, 10:] = 220
    b = extract_boundaries(img)
    cols = sorted(set(np.where(b)[1]))
    assert len(cols) == 1
    assert (b.sum(axis=1) == 1).all()


def test_depth_step_detected_at_edge():
    d = np.full((16, 16), 1.0, np.float32)
    d[:, 8:] = 2.0
    b = extract_boundaries(d)
    assert b.any()
    assert set(np.where(b)[1]) <= {7, 8}
    assert not extract_boundaries(d, threshold=10.0).any()


def test_depth_boundaries_ignore_missing_pixels():
    d = np.full((16, 16), 2.0, np.float32)
    d[:, 6] = 0.0  # a missing stripe must not fake an edge
    b = extract_boundaries(d)
    assert not b.any()
    assert not extract_boundaries(np.zeros((8, 8), np.float32)).any()


def test_depth_aware_map_point_sets():
    m_rgb = np.zeros((8, 8), bool)
    m_rgb[0, 0] = m_rgb[3, 3] = True
    m_d = np.zeros((8, 8), bool)
    m_d[3, 3] = True
    out = depth_aware_map(m_rgb, m_d, dilate_r=0)
    assert np.argwhere(out).tolist() == [[3, 3]]


def test_depth_aware_trivial_cases():
    m_rgb = np.random.default_rng(0).random((12, 12)) > 0.7
    empty = np.zeros((12, 12), bool)
    assert not depth_aware_map(m_rgb, empty).any()
    np.testing.assert_array_equal(depth_aware_map(m_rgb, ~empty), m_rgb)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.bool_, (16, 16)), hnp.arrays(np.bool_, (16, 16)),
       hnp.arrays(np.bool_, (16, 16)))
def test_depth_aware_subset_and_monotone(m_rgb, m_d, extra):
    da = depth_aware_map(m_rgb, m_d)
    assert not (da & ~m_rgb).any()  # always a subset of the RGB boundaries
    bigger = depth_aware_map(m_rgb, m_d | extra)
    assert not (da & ~bigger).any()  # monotone in the depth map


def test_condition_shape_determinism_and_range():
    s = generate_sample(9, SceneConfig())
    f1 = build_condition(s.rgb, s.raw, "optical")
    f2 = build_condition(s.rgb, s.raw, "optical")
    assert f1.shape == (10, 16, 16)
    assert np.array_equal(f1, f2)
    assert np.isfinite(f1).all()
    assert f1[0].min() >= 0.0 and f1[0].max() <= 1.0  # boundary channel
    assert f1[9].min() >= 0.0 and f1[9].max() <= 1.0  # depth channel


def test_condition_empty_depth_boundaries_zero_channel():
    rgb = np.full((16, 16, 3), 128, np.uint8)
    rgb[:, 8:] = 250
    depth = np.full((16, 16), 2.0, np.float32)
    f = build_condition(rgb, depth, "optical")
    assert not f[0].any()  # no depth edges -> empty depth-aware channel
    g = build_condition(rgb, depth, "geometric")
    assert g[0].any()  # RGB boundary channel still fires


def test_condition_rejects_bad_dims_and_branch():
    s = generate_sample(9, SceneConfig())
    with pytest.raises(ValueError, match="divisible by 4"):
        build_condition(s.rgb[:62], s.raw[:62], "optical")
    with pytest.raises(ValueError, match="branch"):
        build_condition(s.rgb, s.raw, "both")
    with pytest.raises(ValueError, match="threshold"):
        extract_boundaries(s.raw, threshold=0.0)
