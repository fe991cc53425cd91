"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

Everything compute-bound lives here: convolution (im2col + BLAS),
2x2 max pooling, 2x2 up-convolution, binary morphology (7x7 median,
5x5 dilation), the z-buffer parallax warp, and primitive ray casting
for the scene simulator.

Each kernel exists twice:

* ``numba_impl.*`` -- ``@njit(cache=True)`` loop kernels, compiled
  lazily and cached on disk between processes;
* ``numpy_impl.*`` -- vectorised numpy fallbacks.

``DITR_NUMBA=0`` in the environment forces the numpy path; the default
is numba whenever it imports.  Integer/boolean kernels agree bit-exactly
across backends; float kernels agree to summation round-off.  Use
``benchmarks/kernel_bench.py`` to time one against the other.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

_EPS_RAY = 1e-6

# Material and primitive codes shared with the scene simulator.
MAT_OPAQUE = 0
MAT_TRANSPARENT = 1
MAT_REFLECTIVE = 2
PRIM_SPHERE = 0
PRIM_BOX = 1
PRIM_RECT = 2


def _numba_requested() -> bool:
    return os.environ.get("DITR_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_im2col(xp, kh, kw, stride):
    """View of all sliding windows, shape (N, C, kh, kw, OH, OW)."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )


def _np_conv2d_fwd(xp, w, stride):
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    cols = _np_im2col(xp, kh, kw, stride)
    oh, ow = cols.shape[4], cols.shape[5]
    # one wide GEMM over all batch positions: (O, C*kh*kw) @ (C*kh*kw, N*OH*OW)
    c2 = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5)).reshape(c * kh * kw, -1)
    y2 = w.reshape(o, -1) @ c2
    return np.ascontiguousarray(y2.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))


def _np_conv2d_bwd_input(dy, w, stride, hp, wp):
    n, o, oh, ow = dy.shape
    _, c, kh, kw = w.shape
    dy2 = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(o, -1)
    dcols = w.reshape(o, -1).T @ dy2  # (C*kh*kw, N*OH*OW)
    dcols = dcols.reshape(c, kh, kw, n, oh, ow)
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                dcols[:, ki, kj].transpose(1, 0, 2, 3)
            )
    return dxp


def _np_conv2d_bwd_kernel(xp, dy, stride, kh, kw):
    n, o = dy.shape[0], dy.shape[1]
    c = xp.shape[1]
    cols = _np_im2col(xp, kh, kw, stride)
    c2 = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5)).reshape(c * kh * kw, -1)
    dy2 = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(o, -1)
    return (dy2 @ c2.T).reshape(o, c, kh, kw)


def _np_maxpool2_fwd(x):
    n, c, h, w = x.shape
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def _np_maxpool2_bwd(dy, idx):
    n, c, oh, ow = dy.shape
    buf = np.zeros((n, c, oh, ow, 4), dtype=dy.dtype)
    np.put_along_axis(buf, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = buf.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, 2 * oh, 2 * ow))


def _np_upconv2_fwd(x, w):
    n, c, h, wd = x.shape
    o = w.shape[1]
    y = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, O, 2, 2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    return np.ascontiguousarray(y)


def _np_upconv2_bwd_input(dy, w):
    n, o, h2, w2 = dy.shape
    dy6 = dy.reshape(n, o, h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    dx = np.tensordot(dy6, w, axes=([3, 4, 5], [1, 2, 3]))  # (N, H, W, C)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def _np_upconv2_bwd_kernel(x, dy):
    n, o, h2, w2 = dy.shape
    dy6 = dy.reshape(n, o, h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    return np.tensordot(x, dy6, axes=([0, 2, 3], [0, 1, 2]))  # (C, O, 2, 2)


def _np_window_count(padded, k):
    """Per-pixel count of set cells in a k x k window of a padded int map."""
    h, w = padded.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    ii[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def _np_median_filter7(mask):
    padded = np.pad(mask.astype(np.int64), 3, mode="edge")
    return _np_window_count(padded, 7) >= 25


def _np_dilate5(mask):
    padded = np.pad(mask.astype(np.int64), 2, mode="constant")
    return _np_window_count(padded, 5) >= 1


def _np_warp_survivors(depth, fx, baseline):
    h, w = depth.shape
    valid = depth > 0.0
    if baseline == 0.0 or not valid.any():
        return valid.copy()
    zmin = depth[valid].min()
    margin = int(np.ceil(fx * baseline / zmin)) + 2
    jj = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    disp = np.zeros((h, w), dtype=np.float64)
    disp[valid] = fx * baseline / depth[valid].astype(np.float64)
    jt = np.floor(jj - disp + 0.5).astype(np.int64) + margin
    zbuf = np.full((h, w + 2 * margin), np.inf, dtype=np.float64)
    ii = np.arange(h)[:, None].repeat(w, axis=1)
    z64 = depth.astype(np.float64)
    np.minimum.at(zbuf, (ii[valid], jt[valid]), z64[valid])
    survivors = np.zeros((h, w), dtype=bool)
    survivors[valid] = zbuf[ii[valid], jt[valid]] == z64[valid]
    return survivors


def _np_ray_dirs(h, w, fx, fy, cx, cy):
    jj = (np.arange(w, dtype=np.float64) - cx) / fx
    ii = (np.arange(h, dtype=np.float64) - cy) / fy
    dx = jj[None, :].repeat(h, axis=0)
    dy = ii[:, None].repeat(w, axis=1)
    return dx, dy


def _np_prim_hits(ox, oy, oz, dx, dy, dz, types, params):
    """Hit parameter per primitive, +inf where missed.  Origin/dirs broadcast."""
    p = types.shape[0]
    shape = np.broadcast(ox, dx).shape
    t_all = np.full((p,) + shape, np.inf, dtype=np.float64)
    a = dx * dx + dy * dy + dz * dz
    for k in range(p):
        cxp, cyp, czp = params[k, 0], params[k, 1], params[k, 2]
        if types[k] == PRIM_SPHERE:
            r = params[k, 3]
            sx, sy, sz = cxp - ox, cyp - oy, czp - oz
            b = dx * sx + dy * sy + dz * sz
            cc = sx * sx + sy * sy + sz * sz - r * r
            disc = b * b - a * cc
            ok = disc >= 0.0
            t = np.where(ok, (b - np.sqrt(np.where(ok, disc, 0.0))) / a, np.inf)
            t_all[k] = np.where(ok & (t > _EPS_RAY), t, np.inf)
        elif types[k] == PRIM_BOX:
            hx, hy, hz = params[k, 3], params[k, 4], params[k, 5]
            tmin = np.full(shape, -np.inf)
            tmax = np.full(shape, np.inf)
            miss = np.zeros(shape, dtype=bool)
            for d_ax, o_ax, c_ax, h_ax in ((dx, ox, cxp, hx), (dy, oy, cyp, hy), (dz, oz, czp, hz)):
                d_arr = np.broadcast_to(np.asarray(d_ax, dtype=np.float64), shape)
                o_arr = np.broadcast_to(np.asarray(o_ax, dtype=np.float64), shape)
                par = np.abs(d_arr) < 1e-12
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = (c_ax - h_ax - o_arr) / d_arr
                    t2 = (c_ax + h_ax - o_arr) / d_arr
                lo = np.minimum(t1, t2)
                hi = np.maximum(t1, t2)
                tmin = np.where(par, tmin, np.maximum(tmin, lo))
                tmax = np.where(par, tmax, np.minimum(tmax, hi))
                miss |= par & (np.abs(o_arr - c_ax) > h_ax)
            ok = ~miss & (tmin <= tmax) & (tmin > _EPS_RAY)
            t_all[k] = np.where(ok, tmin, np.inf)
        else:  # PRIM_RECT, plane patch perpendicular to z
            hx, hy = params[k, 3], params[k, 4]
            d_arr = np.broadcast_to(np.asarray(dz, dtype=np.float64), shape)
            o_arr = np.broadcast_to(np.asarray(oz, dtype=np.float64), shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(d_arr) < 1e-12, np.inf, (czp - o_arr) / d_arr)
            px = ox + t * dx
            py = oy + t * dy
            ok = (t > _EPS_RAY) & (np.abs(px - cxp) <= hx) & (np.abs(py - cyp) <= hy)
            t_all[k] = np.where(ok, t, np.inf)
    return t_all


def _np_raycast(h, w, fx, fy, cx, cy, types, params, mats, z_bg):
    dx, dy = _np_ray_dirs(h, w, fx, fy, cx, cy)
    zeros = np.zeros((h, w), dtype=np.float64)
    p = types.shape[0]
    t_all = _np_prim_hits(zeros, zeros, zeros, dx, dy, 1.0, types, params)

    # first hit over primitives, background plane as fallback
    if p:
        first_id = t_all.argmin(axis=0).astype(np.int32)
        first_t = np.take_along_axis(t_all, first_id[None].astype(np.intp), axis=0)[0]
    else:
        first_id = np.full((h, w), -1, dtype=np.int32)
        first_t = np.full((h, w), np.inf)
    bg = first_t > z_bg
    first_t = np.where(bg, z_bg, first_t)
    first_id = np.where(bg, np.int32(-1), first_id)

    # first non-transparent hit (what the IR signal reads through glass)
    t_solid = t_all.copy() if p else t_all
    for k in range(p):
        if mats[k] == MAT_TRANSPARENT:
            t_solid[k] = np.inf
    if p:
        cont_id = t_solid.argmin(axis=0).astype(np.int32)
        cont_t = np.take_along_axis(t_solid, cont_id[None].astype(np.intp), axis=0)[0]
    else:
        cont_id = np.full((h, w), -1, dtype=np.int32)
        cont_t = np.full((h, w), np.inf)
    bg = cont_t > z_bg
    cont_t = np.where(bg, z_bg, cont_t)
    cont_id = np.where(bg, np.int32(-1), cont_id)

    # mirror bounce: one reflection off first-hit reflective rects, the
    # reflected ray reads the first non-transparent primitive it meets
    refl_t = np.zeros((h, w), dtype=np.float64)
    refl_id = np.full((h, w), -1, dtype=np.int32)
    for k in range(p):
        if mats[k] != MAT_REFLECTIVE:
            continue
        sel = first_id == k
        if not sel.any():
            continue
        tm = first_t[sel]
        ox, oy, oz = tm * dx[sel], tm * dy[sel], tm
        t_ref = _np_prim_hits(ox, oy, oz, dx[sel], dy[sel], -1.0, types, params)
        t_ref[k] = np.inf
        for m in range(p):
            if mats[m] == MAT_TRANSPARENT:
                t_ref[m] = np.inf
        rid = t_ref.argmin(axis=0).astype(np.int32)
        rt = np.take_along_axis(t_ref, rid[None].astype(np.intp), axis=0)[0]
        hit = np.isfinite(rt)
        out_t = np.where(hit, tm + rt, 0.0)
        out_id = np.where(hit, rid, np.int32(-1))
        refl_t[sel] = out_t
        refl_id[sel] = out_id
    return first_t, first_id, cont_t, cont_id, refl_t, refl_id


numpy_impl = SimpleNamespace(
    name="numpy",
    conv2d_fwd=_np_conv2d_fwd,
    conv2d_bwd_input=_np_conv2d_bwd_input,
    conv2d_bwd_kernel=_np_conv2d_bwd_kernel,
    maxpool2_fwd=_np_maxpool2_fwd,
    maxpool2_bwd=_np_maxpool2_bwd,
    upconv2_fwd=_np_upconv2_fwd,
    upconv2_bwd_input=_np_upconv2_bwd_input,
    upconv2_bwd_kernel=_np_upconv2_bwd_kernel,
    median_filter7=_np_median_filter7,
    dilate5=_np_dilate5,
    warp_survivors=_np_warp_survivors,
    raycast=_np_raycast,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised on minimal installs
    numba = None
    HAVE_NUMBA = False


def _build_numba_impl():
    njit = numba.njit

    # Convolution runs per sample in spatial tiles so the im2col buffer
    # stays cache-resident (RAM bandwidth is the binding constraint).

    @njit(cache=True, inline="always")
    def _tile_rows(oh):
        if oh % 4 == 0:
            return 4
        if oh % 2 == 0:
            return 2
        return 1

    @njit(cache=True, inline="always")
    def _fill_cols_tile(cols, xp, ni, y0, rows, kh, kw, stride, ow):
        c = xp.shape[1]
        r = 0
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    if stride == 1:
                        for yi in range(rows):
                            cols[r, yi * ow : (yi + 1) * ow] = xp[ni, ci, y0 + yi + ki, kj : kj + ow]
                    else:
                        for yi in range(rows):
                            xi = (y0 + yi) * stride + ki
                            row = yi * ow
                            for yj in range(ow):
                                cols[r, row + yj] = xp[ni, ci, xi, yj * stride + kj]
                    r += 1

    @njit(cache=True)
    def conv2d_fwd(xp, w, stride):
        n, c, hp, wp = xp.shape
        o, _, kh, kw = w.shape
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        y = np.empty((n, o, oh, ow), dtype=xp.dtype)
        if oh * ow >= 2048:
            # direct accumulation: the only RAM writes are the output, which
            # beats im2col on write-bandwidth-starved machines
            acc = np.empty((oh, ow), dtype=xp.dtype)
            for ni in range(n):
                for oi in range(o):
                    acc[:, :] = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                wv = w[oi, ci, ki, kj]
                                if stride == 1:
                                    for yi in range(oh):
                                        xrow = xp[ni, ci, yi + ki]
                                        arow = acc[yi]
                                        for yj in range(ow):
                                            arow[yj] += wv * xrow[kj + yj]
                                else:
                                    for yi in range(oh):
                                        xi = yi * stride + ki
                                        for yj in range(ow):
                                            acc[yi, yj] += wv * xp[ni, ci, xi, yj * stride + kj]
                    y[ni, oi] = acc
        else:
            # small feature maps, wide channels: per-sample im2col + GEMM
            ck = c * kh * kw
            w2t = np.empty((ck, o), dtype=w.dtype)
            r = 0
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        for oi in range(o):
                            w2t[r, oi] = w[oi, ci, ki, kj]
                        r += 1
            cols = np.empty((oh * ow, ck), dtype=xp.dtype)
            for ni in range(n):
                for yi in range(oh):
                    for yj in range(ow):
                        p = yi * ow + yj
                        r = 0
                        for ci in range(c):
                            for ki in range(kh):
                                xi = yi * stride + ki
                                xj = yj * stride
                                for kj in range(kw):
                                    cols[p, r] = xp[ni, ci, xi, xj + kj]
                                    r += 1
                res = np.dot(cols, w2t)  # (oh*ow, o)
                for oi in range(o):
                    for yi in range(oh):
                        for yj in range(ow):
                            y[ni, oi, yi, yj] = res[yi * ow + yj, oi]
        return y

    @njit(cache=True)
    def conv2d_bwd_input(dy, w, stride, hp, wp):
        n, o, oh, ow = dy.shape
        _, c, kh, kw = w.shape
        ck = c * kh * kw
        w2t = np.empty((ck, o), dtype=w.dtype)
        r = 0
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    for oi in range(o):
                        w2t[r, oi] = w[oi, ci, ki, kj]
                    r += 1
        tr = _tile_rows(oh)
        dy_t = np.empty((o, tr * ow), dtype=dy.dtype)
        dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
        for ni in range(n):
            for y0 in range(0, oh, tr):
                for oi in range(o):
                    for yi in range(tr):
                        dy_t[oi, yi * ow : (yi + 1) * ow] = dy[ni, oi, y0 + yi, :]
                dcols = np.dot(w2t, dy_t)  # (ck, tr*ow)
                r = 0
                for ci in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            for yi in range(tr):
                                xi = (y0 + yi) * stride + ki
                                row = yi * ow
                                if stride == 1:
                                    for yj in range(ow):
                                        dxp[ni, ci, xi, kj + yj] += dcols[r, row + yj]
                                else:
                                    for yj in range(ow):
                                        dxp[ni, ci, xi, yj * stride + kj] += dcols[r, row + yj]
                            r += 1
        return dxp

    @njit(cache=True)
    def conv2d_bwd_kernel(xp, dy, stride, kh, kw):
        n, c = xp.shape[0], xp.shape[1]
        o, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
        ck = c * kh * kw
        dw2t = np.zeros((ck, o), dtype=dy.dtype)
        if oh * ow >= 2048:
            tr = _tile_rows(oh)
            cols = np.empty((ck, tr * ow), dtype=xp.dtype)
            dy_tt = np.empty((tr * ow, o), dtype=dy.dtype)
            for ni in range(n):
                for y0 in range(0, oh, tr):
                    _fill_cols_tile(cols, xp, ni, y0, tr, kh, kw, stride, ow)
                    for yi in range(tr):
                        row = yi * ow
                        for yj in range(ow):
                            for oi in range(o):
                                dy_tt[row + yj, oi] = dy[ni, oi, y0 + yi, yj]
                    dw2t += np.dot(cols, dy_tt)  # (ck, o)
        else:
            npos = oh * ow
            cols = np.empty((ck, npos), dtype=xp.dtype)
            dy_tt = np.empty((npos, o), dtype=dy.dtype)
            for ni in range(n):
                r = 0
                for ci in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            for yi in range(oh):
                                xi = yi * stride + ki
                                row = yi * ow
                                for yj in range(ow):
                                    cols[r, row + yj] = xp[ni, ci, xi, yj * stride + kj]
                            r += 1
                for yi in range(oh):
                    row = yi * ow
                    for yj in range(ow):
                        for oi in range(o):
                            dy_tt[row + yj, oi] = dy[ni, oi, yi, yj]
                dw2t += np.dot(cols, dy_tt)
        dw = np.empty((o, c, kh, kw), dtype=dy.dtype)
        r = 0
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    for oi in range(o):
                        dw[oi, ci, ki, kj] = dw2t[r, oi]
                    r += 1
        return dw

    @njit(cache=True)
    def maxpool2_fwd(x):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        y = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.uint8)
        for ni in range(n):
            for ci in range(c):
                for yi in range(oh):
                    for yj in range(ow):
                        best = x[ni, ci, 2 * yi, 2 * yj]
                        bi = np.uint8(0)
                        k = 0
                        for di in range(2):
                            for dj in range(2):
                                v = x[ni, ci, 2 * yi + di, 2 * yj + dj]
                                if v > best:
                                    best = v
                                    bi = np.uint8(k)
                                k += 1
                        y[ni, ci, yi, yj] = best
                        idx[ni, ci, yi, yj] = bi
        return y, idx

    @njit(cache=True)
    def maxpool2_bwd(dy, idx):
        n, c, oh, ow = dy.shape
        dx = np.zeros((n, c, 2 * oh, 2 * ow), dtype=dy.dtype)
        for ni in range(n):
            for ci in range(c):
                for yi in range(oh):
                    for yj in range(ow):
                        k = idx[ni, ci, yi, yj]
                        dx[ni, ci, 2 * yi + k // 2, 2 * yj + k % 2] = dy[ni, ci, yi, yj]
        return dx

    @njit(cache=True)
    def _upconv_w2(w):
        """(4*O, C) layout of the 2x2 kernels, quadrant-major."""
        c, o = w.shape[0], w.shape[1]
        w2 = np.empty((4 * o, c), dtype=w.dtype)
        for q in range(4):
            for oi in range(o):
                for ci in range(c):
                    w2[q * o + oi, ci] = w[ci, oi, q // 2, q % 2]
        return w2

    @njit(cache=True)
    def upconv2_fwd(x, w):
        n, c, h, wd = x.shape
        o = w.shape[1]
        y = np.empty((n, o, 2 * h, 2 * wd), dtype=x.dtype)
        w2 = _upconv_w2(w)
        for ni in range(n):
            x2 = x[ni].copy().reshape(c, h * wd)
            res = np.dot(w2, x2)  # (4*O, h*wd)
            for q in range(4):
                di, dj = q // 2, q % 2
                for oi in range(o):
                    row = res[q * o + oi]
                    for yi in range(h):
                        base = yi * wd
                        for yj in range(wd):
                            y[ni, oi, 2 * yi + di, 2 * yj + dj] = row[base + yj]
        return y

    @njit(cache=True)
    def upconv2_bwd_input(dy, w):
        n, o, h2, w2d = dy.shape
        c = w.shape[0]
        h, wd = h2 // 2, w2d // 2
        w2 = _upconv_w2(w)
        dy2 = np.empty((4 * o, h * wd), dtype=dy.dtype)
        dx = np.empty((n, c, h, wd), dtype=dy.dtype)
        for ni in range(n):
            for q in range(4):
                di, dj = q // 2, q % 2
                for oi in range(o):
                    row = dy2[q * o + oi]
                    for yi in range(h):
                        base = yi * wd
                        for yj in range(wd):
                            row[base + yj] = dy[ni, oi, 2 * yi + di, 2 * yj + dj]
            res = np.dot(w2.T.copy(), dy2)  # (C, h*wd)
            dx[ni] = res.reshape(c, h, wd)
        return dx

    @njit(cache=True)
    def upconv2_bwd_kernel(x, dy):
        n, c, h, wd = x.shape
        o = dy.shape[1]
        dy2 = np.empty((4 * o, h * wd), dtype=dy.dtype)
        acc = np.zeros((4 * o, c), dtype=dy.dtype)
        for ni in range(n):
            for q in range(4):
                di, dj = q // 2, q % 2
                for oi in range(o):
                    row = dy2[q * o + oi]
                    for yi in range(h):
                        base = yi * wd
                        for yj in range(wd):
                            row[base + yj] = dy[ni, oi, 2 * yi + di, 2 * yj + dj]
            x2t = x[ni].copy().reshape(c, h * wd).T.copy()  # (h*wd, C)
            acc += np.dot(dy2, x2t)
        dw = np.empty((c, o, 2, 2), dtype=dy.dtype)
        for q in range(4):
            for oi in range(o):
                for ci in range(c):
                    dw[ci, oi, q // 2, q % 2] = acc[q * o + oi, ci]
        return dw

    @njit(cache=True)
    def median_filter7(mask):
        h, w = mask.shape
        out = np.zeros((h, w), dtype=np.bool_)
        for i in range(h):
            for j in range(w):
                cnt = 0
                for di in range(-3, 4):
                    ii = i + di
                    if ii < 0:
                        ii = 0
                    elif ii >= h:
                        ii = h - 1
                    for dj in range(-3, 4):
                        jj = j + dj
                        if jj < 0:
                            jj = 0
                        elif jj >= w:
                            jj = w - 1
                        if mask[ii, jj]:
                            cnt += 1
                out[i, j] = cnt >= 25
        return out

    @njit(cache=True)
    def dilate5(mask):
        h, w = mask.shape
        out = np.zeros((h, w), dtype=np.bool_)
        for i in range(h):
            for j in range(w):
                hit = False
                for di in range(-2, 3):
                    ii = i + di
                    if ii < 0 or ii >= h:
                        continue
                    for dj in range(-2, 3):
                        jj = j + dj
                        if jj < 0 or jj >= w:
                            continue
                        if mask[ii, jj]:
                            hit = True
                            break
                    if hit:
                        break
                out[i, j] = hit
        return out

    @njit(cache=True)
    def warp_survivors(depth, fx, baseline):
        h, w = depth.shape
        survivors = np.zeros((h, w), dtype=np.bool_)
        zmin = np.inf
        any_valid = False
        for i in range(h):
            for j in range(w):
                z = depth[i, j]
                if z > 0.0:
                    any_valid = True
                    if z < zmin:
                        zmin = z
        if not any_valid:
            return survivors
        if baseline == 0.0:
            for i in range(h):
                for j in range(w):
                    survivors[i, j] = depth[i, j] > 0.0
            return survivors
        margin = int(np.ceil(fx * baseline / zmin)) + 2
        zbuf = np.full((h, w + 2 * margin), np.inf, dtype=np.float64)
        for i in range(h):
            for j in range(w):
                z = float(depth[i, j])
                if z <= 0.0:
                    continue
                jt = int(np.floor(j - fx * baseline / z + 0.5)) + margin
                if z < zbuf[i, jt]:
                    zbuf[i, jt] = z
        for i in range(h):
            for j in range(w):
                z = float(depth[i, j])
                if z <= 0.0:
                    continue
                jt = int(np.floor(j - fx * baseline / z + 0.5)) + margin
                survivors[i, j] = zbuf[i, jt] == z
        return survivors

    @njit(cache=True)
    def _hit_prim(ox, oy, oz, dx, dy, dz, ptype, p0, p1, p2, p3, p4, p5):
        """Hit parameter of one primitive from an arbitrary origin, inf if missed."""
        if ptype == PRIM_SPHERE:
            a = dx * dx + dy * dy + dz * dz
            sx = p0 - ox
            sy = p1 - oy
            sz = p2 - oz
            b = dx * sx + dy * sy + dz * sz
            cc = sx * sx + sy * sy + sz * sz - p3 * p3
            disc = b * b - a * cc
            if disc < 0.0:
                return np.inf
            t = (b - np.sqrt(disc)) / a
            return t if t > _EPS_RAY else np.inf
        elif ptype == PRIM_BOX:
            tmin = -np.inf
            tmax = np.inf
            for ax in range(3):
                if ax == 0:
                    d, og, ce, hf = dx, ox, p0, p3
                elif ax == 1:
                    d, og, ce, hf = dy, oy, p1, p4
                else:
                    d, og, ce, hf = dz, oz, p2, p5
                if abs(d) < 1e-12:
                    if abs(og - ce) > hf:
                        return np.inf
                else:
                    t1 = (ce - hf - og) / d
                    t2 = (ce + hf - og) / d
                    lo = t1 if t1 < t2 else t2
                    hi = t2 if t1 < t2 else t1
                    if lo > tmin:
                        tmin = lo
                    if hi < tmax:
                        tmax = hi
            if tmin <= tmax and tmin > _EPS_RAY:
                return tmin
            return np.inf
        else:  # PRIM_RECT
            if abs(dz) < 1e-12:
                return np.inf
            t = (p2 - oz) / dz
            if t <= _EPS_RAY:
                return np.inf
            px = ox + t * dx
            py = oy + t * dy
            if abs(px - p0) <= p3 and abs(py - p1) <= p4:
                return t
            return np.inf

    @njit(cache=True)
    def raycast(h, w, fx, fy, cx, cy, types, params, mats, z_bg):
        p = types.shape[0]
        first_t = np.empty((h, w), dtype=np.float64)
        first_id = np.empty((h, w), dtype=np.int32)
        cont_t = np.empty((h, w), dtype=np.float64)
        cont_id = np.empty((h, w), dtype=np.int32)
        refl_t = np.zeros((h, w), dtype=np.float64)
        refl_id = np.full((h, w), -1, dtype=np.int32)
        for i in range(h):
            dy = (i - cy) / fy
            for j in range(w):
                dx = (j - cx) / fx
                bt = np.inf
                bid = -1
                st = np.inf
                sid = -1
                for k in range(p):
                    t = _hit_prim(
                        0.0, 0.0, 0.0, dx, dy, 1.0, types[k],
                        params[k, 0], params[k, 1], params[k, 2],
                        params[k, 3], params[k, 4], params[k, 5],
                    )
                    if t < bt:
                        bt = t
                        bid = k
                    if mats[k] != MAT_TRANSPARENT and t < st:
                        st = t
                        sid = k
                if bt > z_bg:
                    bt = z_bg
                    bid = -1
                if st > z_bg:
                    st = z_bg
                    sid = -1
                first_t[i, j] = bt
                first_id[i, j] = bid
                cont_t[i, j] = st
                cont_id[i, j] = sid
                if bid >= 0 and mats[bid] == MAT_REFLECTIVE:
                    ox = bt * dx
                    oy = bt * dy
                    oz = bt
                    rt = np.inf
                    rid = -1
                    for k in range(p):
                        if k == bid or mats[k] == MAT_TRANSPARENT:
                            continue
                        t = _hit_prim(
                            ox, oy, oz, dx, dy, -1.0, types[k],
                            params[k, 0], params[k, 1], params[k, 2],
                            params[k, 3], params[k, 4], params[k, 5],
                        )
                        if t < rt:
                            rt = t
                            rid = k
                    if np.isfinite(rt):
                        refl_t[i, j] = bt + rt
                        refl_id[i, j] = rid
        return first_t, first_id, cont_t, cont_id, refl_t, refl_id

    return SimpleNamespace(
        name="numba",
        conv2d_fwd=conv2d_fwd,
        conv2d_bwd_input=conv2d_bwd_input,
        conv2d_bwd_kernel=conv2d_bwd_kernel,
        maxpool2_fwd=maxpool2_fwd,
        maxpool2_bwd=maxpool2_bwd,
        upconv2_fwd=upconv2_fwd,
        upconv2_bwd_input=upconv2_bwd_input,
        upconv2_bwd_kernel=upconv2_bwd_kernel,
        median_filter7=median_filter7,
        dilate5=dilate5,
        warp_survivors=warp_survivors,
        raycast=raycast,
    )


numba_impl = _build_numba_impl() if HAVE_NUMBA else None

USE_NUMBA = HAVE_NUMBA and _numba_requested()
_impl = numba_impl if USE_NUMBA else numpy_impl


def active_backend() -> str:
    """Name of the backend serving kernel calls in this process."""
    return _impl.name


def backends() -> list:
    """All importable backends (for equivalence tests and benchmarks)."""
    out = [numpy_impl]
    if numba_impl is not None:
        out.append(numba_impl)
    return out


def conv2d_fwd(xp, w, stride):
    return _impl.conv2d_fwd(xp, w, stride)


def conv2d_bwd_input(dy, w, stride, hp, wp):
    return _impl.conv2d_bwd_input(dy, w, stride, hp, wp)


def conv2d_bwd_kernel(xp, dy, stride, kh, kw):
    return _impl.conv2d_bwd_kernel(xp, dy, stride, kh, kw)


def maxpool2_fwd(x):
    return _impl.maxpool2_fwd(x)


def maxpool2_bwd(dy, idx):
    return _impl.maxpool2_bwd(dy, idx)


def upconv2_fwd(x, w):
    return _impl.upconv2_fwd(x, w)


def upconv2_bwd_input(dy, w):
    return _impl.upconv2_bwd_input(dy, w)


def upconv2_bwd_kernel(x, dy):
    return _impl.upconv2_bwd_kernel(x, dy)


def median_filter7(mask):
    return _impl.median_filter7(mask)


def dilate5(mask):
    return _impl.dilate5(mask)


def warp_survivors(depth, fx, baseline):
    return _impl.warp_survivors(depth, fx, baseline)


def raycast(h, w, fx, fy, cx, cy, types, params, mats, z_bg):
    return _impl.raycast(h, w, fx, fy, cx, cy, types, params, mats, z_bg)
