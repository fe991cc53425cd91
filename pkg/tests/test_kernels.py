"""Backend equivalence: every hot kernel agrees between numba and numpy."""

import numpy as np
import pytest

from ditr import kernels as K

pytestmark = pytest.mark.skipif(K.numba_impl is None, reason="numba unavailable")

rng = np.random.default_rng(7)


def _pair(fn_name, *args):
    return [getattr(be, fn_name)(*args) for be in K.backends()]


@pytest.mark.parametrize("n,c,o,hw,stride", [
    (2, 3, 5, 12, 1), (4, 16, 16, 16, 1), (3, 8, 4, 9, 1),
    (2, 16, 8, 16, 2), (16, 16, 16, 64, 1), (1, 1, 1, 4, 1),
])
def test_conv2d_all_paths_agree(n, c, o, hw, stride):
    x = rng.standard_normal((n, c, hw + 2, hw + 2)).astype(np.float32)
    w = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
    ya, yb = _pair("conv2d_fwd", x, w, stride)
    assert ya.shape == yb.shape
    np.testing.assert_allclose(ya, yb, rtol=1e-3, atol=1e-4)
    dy = rng.standard_normal(ya.shape).astype(np.float32)
    dxa, dxb = _pair("conv2d_bwd_input", dy, w, stride, hw + 2, hw + 2)
    np.testing.assert_allclose(dxa, dxb, rtol=1e-3, atol=1e-4)
    dwa, dwb = _pair("conv2d_bwd_kernel", x, dy, stride, 3, 3)
    np.testing.assert_allclose(dwa, dwb, rtol=1e-3, atol=1e-2)


def test_conv2d_matches_naive_summation():
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    want = np.zeros((2, 4, 6, 6))
    for ni in range(2):
        for oi in range(4):
            for yi in range(6):
                for yj in range(6):
                    want[ni, oi, yi, yj] = float(
                        (x[ni, :, yi : yi + 3, yj : yj + 3].astype(np.float64) * w[oi]).sum()
                    )
    for be in K.backends():
        np.testing.assert_allclose(be.conv2d_fwd(x, w, 1), want, rtol=1e-4, atol=1e-5)


def test_maxpool_and_upconv_agree():
    x = rng.standard_normal((3, 5, 12, 12)).astype(np.float32)
    (ya, ia), (yb, ib) = _pair("maxpool2_fwd", x)
    assert np.array_equal(ya, yb) and np.array_equal(ia, ib)
    dy = rng.standard_normal(ya.shape).astype(np.float32)
    da, db = _pair("maxpool2_bwd", dy, ia)
    assert np.array_equal(da, db)

    w = rng.standard_normal((5, 7, 2, 2)).astype(np.float32)
    ua, ub = _pair("upconv2_fwd", x, w)
    np.testing.assert_allclose(ua, ub, rtol=1e-3, atol=1e-4)
    dyu = rng.standard_normal(ua.shape).astype(np.float32)
    np.testing.assert_allclose(*_pair("upconv2_bwd_input", dyu, w), rtol=1e-3, atol=1e-4)
    np.testing.assert_allclose(*_pair("upconv2_bwd_kernel", x, dyu), rtol=1e-3, atol=1e-2)


def test_morphology_and_warp_agree_exactly():
    mask = rng.random((33, 29)) > 0.6
    ma, mb = _pair("median_filter7", mask)
    assert np.array_equal(ma, mb)
    da, db = _pair("dilate5", mask)
    assert np.array_equal(da, db)

    depth = (rng.random((24, 40)).astype(np.float32) * 3 + 0.5)
    depth[rng.random((24, 40)) < 0.15] = 0.0
    wa, wb = _pair("warp_survivors", depth, 80.0, 0.06)
    assert np.array_equal(wa, wb)


def test_raycast_agrees_exactly():
    types = np.array([K.PRIM_SPHERE, K.PRIM_BOX, K.PRIM_RECT, K.PRIM_RECT], dtype=np.int64)
    params = np.array([
        [0.1, 0.0, 1.4, 0.35, 0.0, 0.0],
        [-0.4, 0.3, 2.2, 0.3, 0.25, 0.2],
        [0.5, -0.2, 1.1, 0.3, 0.25, 0.0],
        [0.0, 0.4, 1.8, 0.5, 0.4, 0.0],
    ])
    mats = np.array([K.MAT_TRANSPARENT, K.MAT_OPAQUE, K.MAT_REFLECTIVE, K.MAT_OPAQUE],
                    dtype=np.int64)
    outs = [be.raycast(48, 40, 50.0, 50.0, 19.5, 23.5, types, params, mats, 3.2)
            for be in K.backends()]
    for a, b in zip(*outs):
        assert np.array_equal(a, b)


def test_env_flag_selects_backend():
    assert K.active_backend() in ("numba", "numpy")
    assert K.USE_NUMBA == (K.active_backend() == "numba")
