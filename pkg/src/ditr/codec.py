"""Pixel-to-latent depth codec: scale-4 encoder/decoder, no skip paths.

The encoder applies two stride-2 conv blocks (each with a single-query
attention block) and projects to ``latent_channels``; the decoder is the
mirror image behind an optional vector-quantization layer.  There is
deliberately no API to hand encoder activations to the decoder: a
latent tensor alone fully determines the reconstruction.

Depth enters normalized to [0, 1] by ``depth_range`` meters and leaves
clamped back to meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays, save_arrays
from .depthmap import DepthMap
from .layers import ChannelNorm, Conv2d, GlobalAttention, Module, Parameter
from .optim import OptimState, clip_gradients, sgd_step, zero_grads
from .rng import STREAM_BATCH, STREAM_INIT, make_rng
from .segmenter import TrainingError


@dataclass
class CodecConfig:
    base_channels: int = 16
    latent_channels: int = 4
    depth_range: float = 5.0
    quantize: bool = True
    codebook_size: int = 512
    commit_weight: float = 0.25
    epochs: int = 80
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.latent_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.quantize and self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")


def _haar_filters(dtype=np.float32) -> np.ndarray:
    """Three 4x4 stride-4 filters measuring the horizontal, vertical, and
    diagonal contrasts between the four 2x2-block means of each cell."""
    m = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=np.float64)
    w = np.zeros((3, 1, 4, 4), dtype=dtype)
    for k in range(3):
        for q, (bi, bj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            w[k, 0, 2 * bi : 2 * bi + 2, 2 * bj : 2 * bj + 2] = m[q, k + 1] / 16.0
    return w


class DepthCodec(Module):
    """Two stride-2 encoder blocks, quantization layer, two up blocks.

    The latent is pyramid-structured: channel 0 is the 4x4 mean of the
    input, channels 1-3 start as the Haar contrasts of the 2x2-block
    means (a trainable stride-4 projection) plus a learned correction
    from the conv trunk.  The decoder inverts the pyramid as a
    parameter-free base and adds detail decoded from the full latent,
    so reconstruction depends on the latent alone (no skip paths).
    """

    def __init__(self, cfg: CodecConfig, rng=None, dtype=np.float32):
        c = cfg.base_channels
        lat = cfg.latent_channels
        if lat < 4:
            raise ValueError("latent needs at least 4 channels (mean + 3 contrasts)")
        self.detail_proj = Conv2d(1, 3, k=4, stride=4, padding=0, bias=False,
                                  rng=rng, dtype=dtype)
        self.detail_proj.w.value = _haar_filters(dtype)
        self.enc1 = Conv2d(1, c, stride=2, bias=False, rng=rng, dtype=dtype)
        self.enc1n = ChannelNorm(c, dtype)
        self.enc1b = Conv2d(c, c, rng=rng, dtype=dtype)
        self.enc1a = GlobalAttention(c, rng=rng, dtype=dtype)
        self.enc2 = Conv2d(c, 2 * c, stride=2, bias=False, rng=rng, dtype=dtype)
        self.enc2n = ChannelNorm(2 * c, dtype)
        self.enc2b = Conv2d(2 * c, 2 * c, rng=rng, dtype=dtype)
        self.enc2a = GlobalAttention(2 * c, rng=rng, dtype=dtype)
        self.to_latent = Conv2d(2 * c, lat - 1, rng=rng, dtype=dtype, init_scale=0.1)

        self.from_latent = Conv2d(lat, 2 * c, bias=False, rng=rng, dtype=dtype)
        self.dec2n = ChannelNorm(2 * c, dtype)
        self.dec2b = Conv2d(2 * c, 2 * c, rng=rng, dtype=dtype)
        self.dec2a = GlobalAttention(2 * c, rng=rng, dtype=dtype)
        # first sub-pixel x2 stage lifts the trunk to block resolution; the
        # refiner then works block-aligned and emits one correction channel
        # per sub-block phase (phase-aware deblocking), assembled by a final
        # depth-to-space.  Translation-invariant full-res convs cannot
        # express per-phase corrections, so this layout is load-bearing.
        self.up1 = Conv2d(2 * c, 4 * c, rng=rng, dtype=dtype)
        self.dec1n = ChannelNorm(c, dtype)
        self.dec1b = Conv2d(c, c, rng=rng, dtype=dtype)
        self.dec1a = GlobalAttention(c, rng=rng, dtype=dtype)
        self.dec0b = Conv2d(c + 1, c, rng=rng, dtype=dtype)
        self.dec0c = Conv2d(c, c, rng=rng, dtype=dtype)
        # SGD-trained readout over trunk features, block means, and their
        # absolute gradients
        self.out = Conv2d(c + 3, 4, rng=rng, dtype=dtype, init_scale=0.1)
        # second readout over a 5x5 window of block means plus neighbor
        # contrast magnitudes (fixed one-hot shift kernels); solved in
        # closed form after SGD, kept frozen
        self.out2 = Conv2d(33, 4, rng=rng, dtype=dtype, init_scale=0.0)
        for p in self.out2.params():
            p.trainable = False
        kx = np.zeros((1, 1, 3, 3), dtype=dtype)
        kx[0, 0, 1, 0], kx[0, 0, 1, 2] = -0.5, 0.5
        self._kx = ad.Tensor(kx)
        self._ky = ad.Tensor(np.ascontiguousarray(kx.transpose(0, 1, 3, 2)))
        shifts = np.zeros((25, 1, 5, 5), dtype=dtype)
        for q in range(25):
            shifts[q, 0, q // 5, q % 5] = 1.0
        self._shifts = ad.Tensor(shifts)

        self.commit_weight = cfg.commit_weight
        if cfg.quantize:
            cb = (rng.standard_normal((cfg.codebook_size, lat)) * 0.5).astype(dtype)
            self.codebook = Parameter("codebook", cb)
        else:
            self.codebook = None

    def encode_t(self, x: ad.Tensor) -> ad.Tensor:
        mean = ad.avgpool(x, 4)
        haar = self.detail_proj(x)
        h = ad.relu(self.enc1n(self.enc1(x)))
        h = self.enc1a(ad.relu(self.enc1b(h)))
        h = ad.relu(self.enc2n(self.enc2(h)))
        h = self.enc2a(ad.relu(self.enc2b(h)))
        corr = self.to_latent(h)
        detail = ad.add(haar, ad.slice_channels(corr, 0, 3))
        if corr.data.shape[1] > 3:
            return ad.concat([mean, detail, ad.slice_channels(corr, 3, corr.data.shape[1])], axis=1)
        return ad.concat([mean, detail], axis=1)

    @staticmethod
    def _depth_to_space2(x: ad.Tensor) -> ad.Tensor:
        n, c4, h, w = x.data.shape
        c = c4 // 4
        y = ad.reshape(x, (n, c, 2, 2, h, w))
        y = ad.transpose(y, (0, 1, 4, 2, 5, 3))
        return ad.reshape(y, (n, c, 2 * h, 2 * w))

    def decode_features(self, z: ad.Tensor):
        """(base image, block means at H/2, refiner features at H/2)."""
        # parameter-free inverse of the latent pyramid: rebuild the four
        # 2x2-block means from mean + contrasts, then upsample bilinearly
        m = ad.slice_channels(z, 0, 1)
        d1 = ad.slice_channels(z, 1, 2)
        d2 = ad.slice_channels(z, 2, 3)
        d3 = ad.slice_channels(z, 3, 4)
        b00 = ad.add(ad.add(m, d1), ad.add(d2, d3))
        b01 = ad.add(ad.sub(m, d1), ad.sub(d2, d3))
        b10 = ad.sub(ad.add(m, d1), ad.add(d2, d3))
        b11 = ad.add(ad.sub(m, d1), ad.sub(d3, d2))
        quad = ad.concat([b00, b01, b10, b11], axis=1)
        means = self._depth_to_space2(quad)  # block-mean image at H/2
        base = ad.bilinear_up2(means)
        h = ad.relu(self.dec2n(self.from_latent(z)))
        h = self.dec2a(ad.relu(self.dec2b(h)))
        h = ad.relu(self.dec1n(self._depth_to_space2(self.up1(h))))
        h = self.dec1a(ad.relu(self.dec1b(h)))
        h = ad.relu(self.dec0b(ad.concat([means, h], axis=1)))
        h = ad.relu(self.dec0c(h))
        gx = ad.conv2d(means, self._kx, padding=1)
        gy = ad.conv2d(means, self._ky, padding=1)
        abs_gx = ad.add(ad.relu(gx), ad.relu(ad.neg(gx)))
        abs_gy = ad.add(ad.relu(gy), ad.relu(ad.neg(gy)))
        feats = ad.concat([h, means, abs_gx, abs_gy], axis=1)
        shifted = ad.conv2d(means, self._shifts, padding=2)
        # absolute contrasts to the 8 immediate neighbors: edge cues the
        # solved readout can use directly
        diffs = []
        for q in (6, 7, 8, 11, 13, 16, 17, 18):  # 3x3 ring inside the 5x5 window
            dq = ad.sub(ad.slice_channels(shifted, q, q + 1), means)
            diffs.append(ad.add(ad.relu(dq), ad.relu(ad.neg(dq))))
        ctx = ad.concat([shifted] + diffs, axis=1)
        return base, means, feats, ctx

    def decode_t(self, z: ad.Tensor) -> ad.Tensor:
        base, _, feats, ctx = self.decode_features(z)
        # one correction channel per sub-block phase, assembled sub-pixel
        corr = ad.add(self.out(feats), self.out2(ctx))
        return ad.add(base, self._depth_to_space2(corr))

    def quantize_t(self, z: ad.Tensor):
        """Straight-through VQ: returns (quantized latent, vq loss, indices)."""
        n, c, h, w = z.data.shape
        flat = z.data.transpose(0, 2, 3, 1).reshape(-1, c)
        cb = self.codebook.value
        d2 = (flat * flat).sum(1)[:, None] - 2.0 * flat @ cb.T + (cb * cb).sum(1)[None, :]
        idx = d2.argmin(axis=1)
        zq_rows = ad.embed(self.codebook.tensor, idx)
        zq = ad.transpose(ad.reshape(zq_rows, (n, h, w, c)), (0, 3, 1, 2))
        st = ad.straight_through(zq, z)
        vq_loss = ad.add(ad.mse(zq, ad.stopgrad(z)),
                         ad.mul(ad.mse(z, ad.stopgrad(zq)), self.commit_weight))
        return st, vq_loss, idx.reshape(n, h, w)


@dataclass
class CodecParams:
    net: DepthCodec
    cfg: CodecConfig
    history: list = field(default_factory=list)


def init_codec(cfg: CodecConfig, seed: int) -> CodecParams:
    return CodecParams(net=DepthCodec(cfg, rng=make_rng(seed, STREAM_INIT, 2)), cfg=cfg)


def normalize_depth(depth: DepthMap, depth_range: float) -> np.ndarray:
    return np.clip(np.asarray(depth, dtype=np.float32) / np.float32(depth_range), 0.0, 1.0)


def _check_dims(h: int, w: int) -> None:
    if h % 4 or w % 4:
        raise ValueError(f"codec needs dims divisible by 4, got {h}x{w}")


def _space_to_depth2(x: np.ndarray) -> np.ndarray:
    """(N, 1, H, W) -> (N, 4, H/2, W/2), channel q holds offset (q//2, q%2)."""
    n, _, h, w = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2).transpose(0, 2, 4, 1, 3).reshape(n, 4, h // 2, w // 2)


def _solve_output_layer(net: DepthCodec, xs: np.ndarray, batch_size: int) -> None:
    """Closed-form ridge solve of the frozen second readout.

    The decoder output is linear in that conv's weights, so given the
    SGD-trained features the MSE-optimal readout over the means-context
    window follows from the normal equations.  Solving on the residual
    left after the trained readout can only reduce training MSE.
    """
    cin = net.out2.w.value.shape[1]
    d = cin * 9 + 1
    xtx = np.zeros((d, d), dtype=np.float64)
    xty = np.zeros((d, 4), dtype=np.float64)
    n = xs.shape[0]
    for start in range(0, n, batch_size):
        xb = xs[start : start + batch_size]
        z = net.encode_t(ad.Tensor(xb))
        if net.codebook is not None:
            z, _, _ = net.quantize_t(z)
        base, _, feats, ctx = net.decode_features(z)
        corr1 = net.out(feats).data
        targ = _space_to_depth2(xb - base.data) - corr1  # (N, 4, H/2, W/2)
        f = np.pad(ctx.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(f, (3, 3), axis=(2, 3))
        nb, _, hh, ww = ctx.data.shape
        rows = win.transpose(0, 2, 3, 1, 4, 5).reshape(nb * hh * ww, cin * 9)
        rows = np.concatenate([rows, np.ones((rows.shape[0], 1), rows.dtype)], axis=1)
        t = targ.transpose(0, 2, 3, 1).reshape(-1, 4)
        xtx += rows.T.astype(np.float64) @ rows.astype(np.float64)
        xty += rows.T.astype(np.float64) @ t.astype(np.float64)
    sol = np.linalg.solve(xtx + 1e-3 * np.eye(d), xty)  # (d, 4)
    net.out2.w.value = sol[:-1].T.reshape(4, cin, 3, 3).astype(net.out2.w.value.dtype)
    net.out2.b.value = sol[-1].astype(net.out2.b.value.dtype)


def train_codec(depths: list[DepthMap], cfg: CodecConfig, seed: int) -> CodecParams:
    """Minimize reconstruction MSE (plus VQ terms when quantization is on).

    SGD epochs first; then the final readout conv is refit in closed form
    (ridge least squares) on the training corpus.
    """
    if not depths:
        raise TrainingError("empty codec training corpus")
    params = init_codec(cfg, seed)
    net = params.net
    h, w = depths[0].shape
    _check_dims(h, w)
    xs = np.stack([normalize_depth(d, cfg.depth_range)[None] for d in depths])
    trainable = net.trainable_params()
    state = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = make_rng(seed, STREAM_BATCH, 2)
    n = xs.shape[0]
    if net.codebook is not None:
        # seed the codebook with actual latent vectors so quantization
        # starts on-distribution instead of fighting random centroids
        z0 = net.encode_t(ad.Tensor(xs[: min(n, 16)])).data
        rows = z0.transpose(0, 2, 3, 1).reshape(-1, z0.shape[1])
        pick = rng.choice(rows.shape[0], size=cfg.codebook_size, replace=rows.shape[0] < cfg.codebook_size)
        net.codebook.value = rows[pick].astype(net.codebook.value.dtype)
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr if epoch < 0.6 * cfg.epochs else cfg.lr * 0.25
        perm = rng.permutation(n)
        ep_loss = 0.0
        ep_mse = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            x = ad.Tensor(xs[perm[start : start + cfg.batch_size]])
            z = net.encode_t(x)
            if net.codebook is not None:
                zq, vq_loss, _ = net.quantize_t(z)
                recon = net.decode_t(zq)
                rec = ad.mse(recon, x)
                loss = ad.add(rec, vq_loss)
            else:
                recon = net.decode_t(z)
                rec = ad.mse(recon, x)
                loss = rec
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite codec loss at epoch {epoch}, step {steps}")
            zero_grads(trainable)
            loss.backward()
            clip_gradients(trainable, 5.0)
            sgd_step(trainable, state)
            ep_loss += float(loss.data)
            ep_mse += float(rec.data)
            steps += 1
        params.history.append({"epoch": epoch, "loss": ep_loss / steps, "mse": ep_mse / steps})
    _solve_output_layer(net, xs, cfg.batch_size)
    recon = decode_batch(encode_batch(np.stack(depths), params), params)
    final = float(np.mean((normalize_depth(np.stack(depths), cfg.depth_range)
                           - normalize_depth(recon, cfg.depth_range)) ** 2))
    params.history.append({"epoch": cfg.epochs, "loss": final, "mse": final,
                           "phase": "readout_solve"})
    return params


def encode_batch(depths: np.ndarray, params: CodecParams) -> np.ndarray:
    """(N, H, W) meters -> (N, C, H/4, W/4) continuous latents."""
    _check_dims(depths.shape[1], depths.shape[2])
    x = normalize_depth(depths, params.cfg.depth_range)[:, None]
    return params.net.encode_t(ad.Tensor(x)).data


def decode_batch(latents: np.ndarray, params: CodecParams, quantize: bool = True) -> np.ndarray:
    """(N, C, h, w) latents -> (N, 4h, 4w) meters, clamped to [0, range]."""
    z = ad.Tensor(np.asarray(latents, dtype=np.float32))
    net = params.net
    if net.codebook is not None and quantize:
        z, _, _ = net.quantize_t(z)
    y = net.decode_t(z).data[:, 0]
    return np.clip(y, 0.0, 1.0) * np.float32(params.cfg.depth_range)


def encode(depth: DepthMap, params: CodecParams) -> np.ndarray:
    """Single depth map (meters) to its (C, H/4, W/4) latent."""
    if depth.ndim != 2:
        raise ValueError(f"encode expects one HxW depth map, got shape {depth.shape}")
    return encode_batch(depth[None], params)[0]


def decode(latent: np.ndarray, params: CodecParams, quantize: bool = True) -> DepthMap:
    """Single latent back to an HxW depth map in meters."""
    lat = np.asarray(latent)
    if lat.ndim != 3 or lat.shape[0] != params.cfg.latent_channels:
        raise ValueError(
            f"decode expects ({params.cfg.latent_channels}, h, w) latent, got {lat.shape}"
        )
    return decode_batch(lat[None], params, quantize=quantize)[0]


def quantize_latent(latent: np.ndarray, params: CodecParams) -> tuple[np.ndarray, np.ndarray]:
    """Snap each latent column to its nearest codebook row; returns (zq, idx)."""
    if params.net.codebook is None:
        raise ValueError("codec was built without a codebook")
    z = ad.Tensor(np.asarray(latent, dtype=np.float32)[None])
    zq, _, idx = params.net.quantize_t(z)
    return zq.data[0], idx[0]


def reconstruction_psnr(depths: list[DepthMap], params: CodecParams) -> float:
    """PSNR (dB) of decode(encode(d)) over normalized depth, averaged."""
    arr = np.stack(depths)
    recon = decode_batch(encode_batch(arr, params), params)
    a = normalize_depth(arr, params.cfg.depth_range)
    b = normalize_depth(recon, params.cfg.depth_range)
    err = float(np.mean((a - b) ** 2))
    return float("inf") if err == 0 else float(10.0 * np.log10(1.0 / err))


def save_codec_checkpoint(path, params: CodecParams) -> None:
    arrays = params.net.state_arrays()
    cfg = params.cfg
    arrays["meta.codec"] = np.array(
        [cfg.base_channels, cfg.latent_channels, cfg.depth_range,
         1.0 if cfg.quantize else 0.0, cfg.codebook_size], dtype=np.float32)
    save_arrays(path, arrays)


def load_codec_checkpoint(path) -> CodecParams:
    arrays = load_arrays(path)
    meta = arrays.pop("meta.codec")
    cfg = CodecConfig(base_channels=int(meta[0]), latent_channels=int(meta[1]),
                      depth_range=float(meta[2]), quantize=bool(meta[3] > 0),
                      codebook_size=int(meta[4]))
    params = init_codec(cfg, seed=0)
    params.net.load_state_arrays(arrays)
    return params
