#!/usr/bin/env python3
"""Time every hot kernel on the numba and numpy backends.

Run:

    python benchmarks/kernel_bench.py [--reps N] [--size HxW]

The active backend for the library itself follows ``DITR_NUMBA``; this
script always times both implementations side by side.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ditr import kernels as K


def bench(fn, *args, reps=10):
    fn(*args)  # warm-up / JIT
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1e3


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--size", default="64x64")
    args = ap.parse_args()
    h, w = (int(v) for v in args.size.lower().split("x"))
    rng = np.random.default_rng(0)

    x = rng.standard_normal((16, 16, h, w)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wconv = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    wup = rng.standard_normal((16, 16, 2, 2)).astype(np.float32)
    mask = rng.random((h, w)) > 0.6
    depth = (rng.random((h, w)).astype(np.float32) * 3 + 0.5)
    depth[rng.random((h, w)) < 0.1] = 0.0
    types = np.array([K.PRIM_SPHERE, K.PRIM_BOX, K.PRIM_RECT], dtype=np.int64)
    params = np.array([[0.1, 0.0, 1.4, 0.35, 0, 0],
                       [-0.4, 0.3, 2.2, 0.3, 0.25, 0.2],
                       [0.5, -0.2, 1.1, 0.3, 0.25, 0]])
    mats = np.array([K.MAT_TRANSPARENT, K.MAT_OPAQUE, K.MAT_REFLECTIVE], dtype=np.int64)

    cases = [
        ("conv2d_fwd", lambda be: be.conv2d_fwd(xp, wconv, 1)),
        ("conv2d_bwd_input", lambda be: be.conv2d_bwd_input(dy, wconv, 1, h + 2, w + 2)),
        ("conv2d_bwd_kernel", lambda be: be.conv2d_bwd_kernel(xp, dy, 1, 3, 3)),
        ("maxpool2_fwd", lambda be: be.maxpool2_fwd(x)),
        ("upconv2_fwd", lambda be: be.upconv2_fwd(x, wup)),
        ("median_filter7", lambda be: be.median_filter7(mask)),
        ("dilate5", lambda be: be.dilate5(mask)),
        ("warp_survivors", lambda be: be.warp_survivors(depth, 80.0, 0.06)),
        ("raycast", lambda be: be.raycast(h, w, 1.25 * w, 1.25 * w, (w - 1) / 2,
                                          (h - 1) / 2, types, params, mats, 3.2)),
    ]

    backends = K.backends()
    names = [be.name for be in backends]
    print(f"batch 16x16x{h}x{w} float32; median over {args.reps} reps (ms)")
    print(f"{'kernel':<20s}" + "".join(f"{n:>10s}" for n in names) + f"{'speedup':>10s}")
    for label, call in cases:
        times = [bench(lambda be=be: call(be), reps=args.reps) for be in backends]
        ratio = times[0] / times[-1] if len(times) > 1 and times[-1] > 0 else 1.0
        print(f"{label:<20s}" + "".join(f"{t:10.2f}" for t in times) + f"{ratio:10.2f}x")
    print(f"\nactive library backend: {K.active_backend()} "
          f"(set DITR_NUMBA=0 to force numpy)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
