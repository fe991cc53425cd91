"""Stage Two core: noise schedule, conditional denoising network, training,
ancestral sampling, and dual-branch masked depth inpainting.

The generative model runs in the codec's latent space.  A four-level
U-Net (channel widths c, 2c, 4c, 8c; two 3x3 convs + ReLU per level;
2x2 max pooling down, 2x2 up-convolution up; a 1x1 projection plus
self- and single-query cross-attention at the bottleneck) predicts the
noise component of a latent given the timestep and a conditioning
feature map.  Sampling walks the reverse chain with fixed variance
beta_t.  Inpainting keeps the known region pinned by re-noising its
clean latent at every step and composites in pixel space at the end,
so valid pixels outside the target region pass through bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .boundary import build_condition
from .checkpoint import load_arrays, save_arrays
from .codec import CodecParams, decode_batch, encode_batch
from .depthmap import DepthMap, RegionPartition, RgbImage
from .layers import (ChannelNorm, Conv2d, ConvTranspose2x2, GlobalAttention,
                     Linear, Module, sinusoidal_embedding)
from .optim import OptimState, clip_gradients, sgd_step, zero_grads
from .rng import STREAM_BATCH, STREAM_INIT, STREAM_NOISE, STREAM_SAMPLER, make_rng
from .segmenter import TrainingError

FILL_FLOOR_M = 1e-3  # filled pixels never carry the missing sentinel


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """beta_t, alpha_t = 1 - beta_t, and their running product, t = 1..T."""

    timesteps: int
    betas: np.ndarray  # (T,) float64, betas[t-1] is beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def make_schedule(timesteps: int, beta1: float = 1e-4, beta_t: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    """Linear beta ramp between beta1 and beta_t over ``timesteps`` steps."""
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind '{kind}'")
    if not (0.0 < beta1 <= beta_t < 1.0):
        raise ValueError(f"need 0 < beta1 <= beta_T < 1, got {beta1}, {beta_t}")
    if timesteps < 1:
        raise ValueError("schedule needs at least one step")
    betas = np.linspace(beta1, beta_t, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sched = NoiseSchedule(timesteps, betas, alphas, alpha_bars)
    if not np.all(np.diff(alpha_bars) < 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    return sched


def q_sample(l0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: sqrt(abar_t) * l0 + sqrt(1 - abar_t) * eps."""
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"t must be in 1..{sched.timesteps}, got {t}")
    ab = sched.alpha_bar(t)
    dt = l0.dtype
    return (np.sqrt(ab, dtype=np.float64).astype(dt) * l0
            + np.sqrt(1.0 - ab).astype(dt) * eps)


def _q_sample_batch(l0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                    sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bars[t - 1].astype(l0.dtype)[:, None, None, None]
    return np.sqrt(ab) * l0 + np.sqrt(1.0 - ab) * eps


# -- denoising network ---------------------------------------------------------


@dataclass
class UNetConfig:
    latent_channels: int = 4
    cond_channels: int = 10
    base_channels: int = 16
    emb_dim: int = 32
    concat_condition: bool = True  # also feed the feature map to the first conv
    predict: str = "eps"  # "eps" or "x0" (reparameterized head)

    def __post_init__(self):
        if self.predict not in ("eps", "x0"):
            raise ValueError(f"predict must be 'eps' or 'x0', got '{self.predict}'")


class DenoiseUNet(Module):
    """Four levels, doubling widths, bottleneck projection + attention."""

    def __init__(self, cfg: UNetConfig, rng=None, dtype=np.float32):
        c = cfg.base_channels
        cin = cfg.latent_channels + (cfg.cond_channels if cfg.concat_condition else 0)
        self.cfg_concat = cfg.concat_condition
        self.emb_dim = cfg.emb_dim

        self.enc1a = Conv2d(cin, c, bias=False, rng=rng, dtype=dtype)
        self.enc1n = ChannelNorm(c, dtype)
        self.enc1b = Conv2d(c, c, rng=rng, dtype=dtype)
        self.t1 = Linear(cfg.emb_dim, c, rng, dtype)
        self.enc2a = Conv2d(c, 2 * c, bias=False, rng=rng, dtype=dtype)
        self.enc2n = ChannelNorm(2 * c, dtype)
        self.enc2b = Conv2d(2 * c, 2 * c, rng=rng, dtype=dtype)
        self.t2 = Linear(cfg.emb_dim, 2 * c, rng, dtype)
        self.enc3a = Conv2d(2 * c, 4 * c, bias=False, rng=rng, dtype=dtype)
        self.enc3n = ChannelNorm(4 * c, dtype)
        self.enc3b = Conv2d(4 * c, 4 * c, rng=rng, dtype=dtype)
        self.t3 = Linear(cfg.emb_dim, 4 * c, rng, dtype)
        self.enc4a = Conv2d(4 * c, 8 * c, bias=False, rng=rng, dtype=dtype)
        self.enc4n = ChannelNorm(8 * c, dtype)
        self.enc4b = Conv2d(8 * c, 8 * c, rng=rng, dtype=dtype)
        self.t4 = Linear(cfg.emb_dim, 8 * c, rng, dtype)
        self.proj = Conv2d(8 * c, 8 * c, k=1, padding=0, rng=rng, dtype=dtype)
        self.self_attn = GlobalAttention(8 * c, rng=rng, dtype=dtype)
        self.cross_attn = GlobalAttention(8 * c, query_dim=cfg.cond_channels, rng=rng, dtype=dtype)

        self.up3 = ConvTranspose2x2(8 * c, 4 * c, rng=rng, dtype=dtype)
        self.dec3a = Conv2d(8 * c, 4 * c, rng=rng, dtype=dtype)
        self.dec3n = ChannelNorm(4 * c, dtype)
        self.dec3b = Conv2d(4 * c, 4 * c, rng=rng, dtype=dtype)
        self.up2 = ConvTranspose2x2(4 * c, 2 * c, rng=rng, dtype=dtype)
        self.dec2a = Conv2d(4 * c, 2 * c, rng=rng, dtype=dtype)
        self.dec2n = ChannelNorm(2 * c, dtype)
        self.dec2b = Conv2d(2 * c, 2 * c, rng=rng, dtype=dtype)
        self.up1 = ConvTranspose2x2(2 * c, c, rng=rng, dtype=dtype)
        self.dec1a = Conv2d(2 * c, c, rng=rng, dtype=dtype)
        self.dec1n = ChannelNorm(c, dtype)
        self.dec1b = Conv2d(c, c, rng=rng, dtype=dtype)
        self.head = Conv2d(c, cfg.latent_channels, rng=rng, dtype=dtype, init_scale=0.1)

    def forward_t(self, lt: ad.Tensor, t: np.ndarray, feat: ad.Tensor) -> ad.Tensor:
        n = lt.data.shape[0]
        dtype = lt.data.dtype
        emb = np.stack([sinusoidal_embedding(int(ti), self.emb_dim) for ti in t]).astype(dtype)
        emb_t = ad.Tensor(emb)
        x = ad.concat([lt, feat], axis=1) if self.cfg_concat else lt

        def tbias(lin, width):
            return ad.reshape(lin(emb_t), (n, width, 1, 1))

        c = self.enc1b.w.value.shape[0]
        h1 = ad.relu(self.enc1n(self.enc1a(x)))
        h1 = ad.relu(self.enc1b(ad.add(h1, tbias(self.t1, c))))
        h2 = ad.relu(self.enc2n(self.enc2a(ad.maxpool2x2(h1))))
        h2 = ad.relu(self.enc2b(ad.add(h2, tbias(self.t2, 2 * c))))
        h3 = ad.relu(self.enc3n(self.enc3a(ad.maxpool2x2(h2))))
        h3 = ad.relu(self.enc3b(ad.add(h3, tbias(self.t3, 4 * c))))
        h4 = ad.relu(self.enc4n(self.enc4a(ad.maxpool2x2(h3))))
        h4 = ad.relu(self.enc4b(ad.add(h4, tbias(self.t4, 8 * c))))
        h4 = self.proj(h4)
        h4 = self.self_attn(h4)
        cond_vec = ad.mean(feat, axis=(2, 3))
        h4 = self.cross_attn(h4, query_source=cond_vec)

        d3 = ad.relu(self.dec3a(ad.concat([ad.relu(self.up3(h4)), h3])))
        d3 = ad.relu(self.dec3b(self.dec3n(d3)))
        d2 = ad.relu(self.dec2a(ad.concat([ad.relu(self.up2(d3)), h2])))
        d2 = ad.relu(self.dec2b(self.dec2n(d2)))
        d1 = ad.relu(self.dec1a(ad.concat([ad.relu(self.up1(d2)), h1])))
        d1 = ad.relu(self.dec1b(self.dec1n(d1)))
        return self.head(d1)


@dataclass
class UNetParams:
    net: DenoiseUNet
    cfg: UNetConfig
    latent_mu: np.ndarray  # per-channel latent standardization
    latent_sigma: np.ndarray
    history: list = field(default_factory=list)


def init_unet(cfg: UNetConfig, seed: int) -> UNetParams:
    net = DenoiseUNet(cfg, rng=make_rng(seed, STREAM_INIT, 3))
    lat = cfg.latent_channels
    return UNetParams(net=net, cfg=cfg,
                      latent_mu=np.zeros(lat, dtype=np.float32),
                      latent_sigma=np.ones(lat, dtype=np.float32))


def standardize(latents: np.ndarray, params: UNetParams) -> np.ndarray:
    mu = params.latent_mu[None, :, None, None]
    sd = params.latent_sigma[None, :, None, None]
    return (latents - mu) / sd


def unstandardize(latents: np.ndarray, params: UNetParams) -> np.ndarray:
    mu = params.latent_mu[None, :, None, None]
    sd = params.latent_sigma[None, :, None, None]
    return latents * sd + mu


def unet_forward(latent: np.ndarray, t: int, feat: np.ndarray, params: UNetParams) -> np.ndarray:
    """Predicted noise for one standardized latent; pure function."""
    lat = np.asarray(latent, dtype=np.float32)
    if lat.ndim != 3:
        raise ValueError(f"expected (C, h, w) latent, got shape {lat.shape}")
    eps = _model_eps_batch(lat[None], np.array([t]), np.asarray(feat, np.float32)[None], params)
    return eps[0]


def _model_eps_batch(lt: np.ndarray, t: np.ndarray, feat: np.ndarray,
                     params: UNetParams, sched: NoiseSchedule | None = None) -> np.ndarray:
    out = params.net.forward_t(ad.Tensor(lt), t, ad.Tensor(feat)).data
    if params.cfg.predict == "x0":
        if sched is None:
            raise ValueError("x0 head needs the schedule to reparameterize")
        a = sched.alphas[t - 1].astype(lt.dtype)[:, None, None, None]
        out = lt - a * out
    return out


# -- training ------------------------------------------------------------------


@dataclass
class DiffusionTrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    timesteps: int = 100
    beta1: float = 1e-3
    beta_t: float = 0.15
    unet: UNetConfig = field(default_factory=UNetConfig)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta1, self.beta_t)


def train_diffusion_step(l0_batch: np.ndarray, feat_batch: np.ndarray,
                         params: UNetParams, sched: NoiseSchedule,
                         state: OptimState, rng: np.random.Generator) -> float:
    """One denoising-score step: sample t and noise, regress the noise."""
    n = l0_batch.shape[0]
    t = rng.integers(1, sched.timesteps + 1, size=n)
    eps = rng.standard_normal(l0_batch.shape, dtype=np.float32)
    lt = _q_sample_batch(l0_batch, t, eps, sched)
    net = params.net
    pred = net.forward_t(ad.Tensor(lt), t, ad.Tensor(feat_batch))
    if params.cfg.predict == "x0":
        a = ad.Tensor(sched.alphas[t - 1].astype(np.float32)[:, None, None, None])
        pred = ad.sub(ad.Tensor(lt), ad.mul(a, pred))
    loss = ad.mse(ad.Tensor(eps), pred)
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite diffusion loss; step refused")
    trainable = net.trainable_params()
    zero_grads(trainable)
    loss.backward()
    clip_gradients(trainable, 5.0)
    sgd_step(trainable, state)
    return float(loss.data)


def train_diffusion(latents: np.ndarray, feats: np.ndarray, cfg: DiffusionTrainConfig,
                    seed: int) -> UNetParams:
    """Train one branch on precomputed (frozen-codec) latents and features.

    Latents are standardized per channel; the statistics ride along in the
    returned parameters so sampling can undo them.
    """
    if latents.shape[0] == 0:
        raise TrainingError("empty diffusion training set")
    params = init_unet(cfg.unet, seed)
    params.latent_mu = latents.mean(axis=(0, 2, 3)).astype(np.float32)
    params.latent_sigma = (latents.std(axis=(0, 2, 3)) + 1e-6).astype(np.float32)
    z = standardize(latents, params).astype(np.float32)
    sched = cfg.schedule()
    state = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = make_rng(seed, STREAM_BATCH, 3)
    noise_rng = make_rng(seed, STREAM_NOISE)
    n = z.shape[0]
    for step in range(cfg.steps):
        if step == int(0.7 * cfg.steps):
            state.lr = cfg.lr * 0.25
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss = train_diffusion_step(z[idx], feats[idx], params, sched, state, noise_rng)
        if step % 50 == 0 or step == cfg.steps - 1:
            params.history.append({"step": step, "loss": loss})
    return params


# -- sampling ------------------------------------------------------------------


def sample(shape: tuple, feat: np.ndarray, sched: NoiseSchedule, model,
           seed: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Ancestral reverse walk from pure noise; variance fixed to beta_t.

    ``model`` is UNetParams or a callable ``(l_t, t) -> eps_hat`` (the
    latter lets tests plug oracles).  Deterministic given the seed.
    """
    rng = rng if rng is not None else make_rng(seed, STREAM_SAMPLER)
    lt = rng.standard_normal(shape, dtype=np.float32)
    feat_b = None if feat is None else np.asarray(feat, np.float32)[None]
    for t in range(sched.timesteps, 0, -1):
        if isinstance(model, UNetParams):
            eps_hat = _model_eps_batch(lt[None], np.array([t]), feat_b, model, sched)[0]
        else:
            eps_hat = model(lt, t)
        lt = _ancestral_step(lt, eps_hat, t, sched, rng)
    return lt


def _ancestral_step(lt: np.ndarray, eps_hat: np.ndarray, t: int,
                    sched: NoiseSchedule, rng) -> np.ndarray:
    b = sched.beta(t)
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    dt = lt.dtype
    mean = (lt - (b / np.sqrt(1.0 - ab)).astype(dt) * eps_hat) / np.sqrt(a).astype(dt)
    if t > 1:
        return mean + np.sqrt(b).astype(dt) * rng.standard_normal(lt.shape, dtype=np.float32)
    return mean


# -- masked inpainting ---------------------------------------------------------


@dataclass
class BranchModels:
    """Independent (codec, denoiser) pairs for the two depth-loss kinds."""

    optical: tuple[CodecParams, UNetParams]
    geometric: tuple[CodecParams, UNetParams]


def _latent_known_mask(known_px: np.ndarray) -> np.ndarray:
    """A latent cell is known only when its whole 4x4 pixel block is known."""
    n, h, w = known_px.shape
    blocks = known_px.reshape(n, h // 4, 4, w // 4, 4)
    return blocks.all(axis=(2, 4))[:, None].astype(np.float32)


def _branch_fill(known_depth: np.ndarray, feats: np.ndarray, codec: CodecParams,
                 unet: UNetParams, sched: NoiseSchedule, seed: int, stream: int) -> np.ndarray:
    """Masked-reprojection sampling for a batch; returns decoded meters.

    At every reverse step the known region of the latent is overwritten
    with a freshly noised encoding of the known depth, so generation is
    conditioned on everything the sensor did measure.
    """
    n = known_depth.shape[0]
    l_known = standardize(encode_batch(known_depth, codec), unet).astype(np.float32)
    m = _latent_known_mask(known_depth > 0)
    rngs = [make_rng(seed, STREAM_SAMPLER, stream, i) for i in range(n)]
    lt = np.stack([r.standard_normal(l_known.shape[1:], dtype=np.float32) for r in rngs])
    for t in range(sched.timesteps, 0, -1):
        eps_t = np.stack([r.standard_normal(l_known.shape[1:], dtype=np.float32) for r in rngs])
        lt = m * _q_sample_batch(l_known, np.full(n, t), eps_t, sched) + (1.0 - m) * lt
        eps_hat = _model_eps_batch(lt, np.full(n, t), feats, unet, sched)
        b = sched.beta(t)
        a = sched.alpha(t)
        ab = sched.alpha_bar(t)
        mean = (lt - np.float32(b / np.sqrt(1.0 - ab)) * eps_hat) / np.float32(np.sqrt(a))
        if t > 1:
            z = np.stack([r.standard_normal(l_known.shape[1:], dtype=np.float32) for r in rngs])
            lt = mean + np.float32(np.sqrt(b)) * z
        else:
            lt = mean
    lt = m * l_known + (1.0 - m) * lt
    fill = decode_batch(unstandardize(lt, unet), codec)
    return np.maximum(fill, FILL_FLOOR_M)


def inpaint_batch(raws: np.ndarray, rgbs: np.ndarray, optical_masks: np.ndarray,
                  models: BranchModels, sched: NoiseSchedule, seed: int,
                  depth_range: float = 5.0) -> np.ndarray:
    """Dual-branch restoration of a batch of samples (vectorized loop body).

    The optical branch re-estimates depth inside the (refined) optical
    masks; the geometric branch regenerates missing pixels elsewhere.
    Valid pixels outside the optical masks pass through bit-exactly.
    """
    n, h, w = raws.shape
    out = raws.copy()

    if optical_masks.any():
        known = raws.copy()
        known[optical_masks] = 0.0
        feats = np.stack([build_condition(rgbs[i], raws[i], "optical", depth_range)
                          for i in range(n)])
        fill = _branch_fill(known, feats, *models.optical, sched, seed, 1)
        out[optical_masks] = fill[optical_masks]

    holes = (raws == 0) & ~optical_masks
    if holes.any():
        feats = np.stack([build_condition(rgbs[i], raws[i], "geometric", depth_range)
                          for i in range(n)])
        fill = _branch_fill(raws, feats, *models.geometric, sched, seed, 2)
        out[holes] = fill[holes]
    return out


def inpaint_depth(raw: DepthMap, rgb: RgbImage, part: RegionPartition,
                  models: BranchModels, sched: NoiseSchedule, seed: int,
                  depth_range: float = 5.0) -> DepthMap:
    """Restore one sample; see ``inpaint_batch`` for the contract."""
    if raw.shape[0] % 4 or raw.shape[1] % 4:
        raise ValueError(f"inpainting needs dims divisible by 4, got {raw.shape}")
    if part.optical.all():
        import warnings

        warnings.warn("optical mask covers the whole image; nothing is known", stacklevel=2)
    return inpaint_batch(raw[None], rgb[None], part.optical[None], models, sched, seed,
                         depth_range)[0]


# -- checkpointing -------------------------------------------------------------


def save_unet_checkpoint(path, params: UNetParams) -> None:
    arrays = params.net.state_arrays()
    cfg = params.cfg
    arrays["meta.unet"] = np.array(
        [cfg.latent_channels, cfg.cond_channels, cfg.base_channels, cfg.emb_dim,
         1.0 if cfg.concat_condition else 0.0, 1.0 if cfg.predict == "x0" else 0.0],
        dtype=np.float32)
    arrays["meta.latent_mu"] = params.latent_mu
    arrays["meta.latent_sigma"] = params.latent_sigma
    save_arrays(path, arrays)


def load_unet_checkpoint(path) -> UNetParams:
    arrays = load_arrays(path)
    meta = arrays.pop("meta.unet")
    cfg = UNetConfig(latent_channels=int(meta[0]), cond_channels=int(meta[1]),
                     base_channels=int(meta[2]), emb_dim=int(meta[3]),
                     concat_condition=bool(meta[4] > 0),
                     predict="x0" if meta[5] > 0 else "eps")
    params = init_unet(cfg, seed=0)
    params.latent_mu = arrays.pop("meta.latent_mu")
    params.latent_sigma = arrays.pop("meta.latent_sigma")
    params.net.load_state_arrays(arrays)
    return params
