"""Stage One: propose and refine the optically corrupted region.

A compact encoder-decoder (3 down / 3 up levels, skip fusion by
concatenation, sigmoid head) maps 4-channel RGB-D input to a per-pixel
probability of optical corruption.  The raw mask is then refined
morphologically: a 7x7 median filter removes speckle, and three passes
of 5x5 dilation add a safety margin so object rims are not missed.

Training is two-phase: plain BCE against ground-truth masks first, then
an optional fine-tune that adds the end-to-end depth RMSE of a frozen
inpainting stage, differentiated through the sigmoid probabilities used
as a soft gate between the inpainted and passthrough depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .checkpoint import load_arrays, save_arrays
from .depthmap import DepthMap, Mask, RgbImage, Sample
from .layers import Conv2d, ConvTranspose2x2, Module
from .optim import OptimState, sgd_step, zero_grads
from .rng import STREAM_BATCH, STREAM_INIT, make_rng


class TrainingError(RuntimeError):
    """Raised when a training run cannot continue (bad loss, empty data)."""


@dataclass
class SegTrainConfig:
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 200
    base_lr: float = 0.01
    finetune_lr: float = 1e-3
    finetune_epochs: int = 50
    rmse_weight: float = 1.0
    base_channels: int = 10
    depth_range: float = 5.0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "base_lr", "finetune_lr", "finetune_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_schedule(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine half-window times an exponential decay reaching e^-3 at the end.

    lr(0) = base_lr exactly; lr(total_epochs) = 0 exactly.
    """
    lam = 3.0 / total_epochs
    return base_lr * np.exp(-lam * epoch) * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


class SegNet(Module):
    """4-channel in, 1-logit out; 3 pooling levels with concat skip fusion."""

    def __init__(self, base_channels: int = 10, rng=None, dtype=np.float32):
        c = base_channels
        self.enc1a = Conv2d(4, c, rng=rng, dtype=dtype)
        self.enc1b = Conv2d(c, c, rng=rng, dtype=dtype)
        self.enc2a = Conv2d(c, 2 * c, rng=rng, dtype=dtype)
        self.enc2b = Conv2d(2 * c, 2 * c, rng=rng, dtype=dtype)
        self.enc3a = Conv2d(2 * c, 4 * c, rng=rng, dtype=dtype)
        self.enc3b = Conv2d(4 * c, 4 * c, rng=rng, dtype=dtype)
        self.mid = Conv2d(4 * c, 8 * c, rng=rng, dtype=dtype)
        self.up3 = ConvTranspose2x2(8 * c, 4 * c, rng=rng, dtype=dtype)
        self.dec3 = Conv2d(8 * c, 4 * c, rng=rng, dtype=dtype)
        self.up2 = ConvTranspose2x2(4 * c, 2 * c, rng=rng, dtype=dtype)
        self.dec2 = Conv2d(4 * c, 2 * c, rng=rng, dtype=dtype)
        self.up1 = ConvTranspose2x2(2 * c, c, rng=rng, dtype=dtype)
        self.dec1 = Conv2d(2 * c, c, rng=rng, dtype=dtype)
        self.head = Conv2d(c, 1, k=1, padding=0, rng=rng, dtype=dtype)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        e1 = ad.relu(self.enc1b(ad.relu(self.enc1a(x))))
        e2 = ad.relu(self.enc2b(ad.relu(self.enc2a(ad.maxpool2x2(e1)))))
        e3 = ad.relu(self.enc3b(ad.relu(self.enc3a(ad.maxpool2x2(e2)))))
        m = ad.relu(self.mid(ad.maxpool2x2(e3)))
        d3 = ad.relu(self.dec3(ad.concat([ad.relu(self.up3(m)), e3])))
        d2 = ad.relu(self.dec2(ad.concat([ad.relu(self.up2(d3)), e2])))
        d1 = ad.relu(self.dec1(ad.concat([ad.relu(self.up1(d2)), e1])))
        return self.head(d1)


@dataclass
class SegParams:
    net: SegNet
    base_channels: int
    depth_range: float
    input_hw: tuple | None = None  # set after training; None accepts any size
    history: list = field(default_factory=list)


def rgbd_input(rgb: RgbImage, depth: DepthMap, depth_range: float) -> np.ndarray:
    """(4, H, W) float32 network input: RGB in [0,1] plus normalized depth."""
    rgbf = rgb.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    d = np.clip(depth / np.float32(depth_range), 0.0, 1.0)[None]
    return np.concatenate([rgbf, d], axis=0)


def init_seg_params(cfg: SegTrainConfig, seed: int) -> SegParams:
    rng = make_rng(seed, STREAM_INIT)
    net = SegNet(cfg.base_channels, rng=rng)
    return SegParams(net=net, base_channels=cfg.base_channels, depth_range=cfg.depth_range)


def train_segmenter(corpus: list[Sample], cfg: SegTrainConfig, seed: int) -> SegParams:
    """Phase-one training: pixelwise BCE against ground-truth optical masks."""
    if not corpus:
        raise TrainingError("empty training corpus")
    params = init_seg_params(cfg, seed)
    xs = np.stack([rgbd_input(s.rgb, s.raw, cfg.depth_range) for s in corpus])
    ys = np.stack([s.optical_gt.astype(np.float32)[None] for s in corpus])
    _run_bce_loop(params, xs, ys, cfg, seed, cfg.epochs, cfg.base_lr)
    params.input_hw = (xs.shape[2], xs.shape[3])
    return params


def _run_bce_loop(params: SegParams, xs, ys, cfg, seed, epochs, base_lr,
                  extra_loss=None) -> None:
    net = params.net
    trainable = net.trainable_params()
    state = OptimState(lr=base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = make_rng(seed, STREAM_BATCH)
    n = xs.shape[0]
    for epoch in range(epochs):
        state.lr = max(lr_schedule(epoch, epochs, base_lr), 1e-12)
        perm = rng.permutation(n)
        ep_loss = 0.0
        ep_bce = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = ad.Tensor(xs[idx])
            logits = net(x)
            bce = ad.bce_with_logits(logits, ys[idx])
            loss = bce if extra_loss is None else ad.add(bce, extra_loss(logits, idx))
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}")
            zero_grads(trainable)
            loss.backward()
            sgd_step(trainable, state)
            ep_loss += float(loss.data)
            ep_bce += float(bce.data)
            steps += 1
        params.history.append({"epoch": epoch, "loss": ep_loss / steps, "bce": ep_bce / steps,
                               "lr": state.lr})


def predict_region(rgb: RgbImage, depth: DepthMap, params: SegParams) -> Mask:
    """Hard optical-region proposal: sigmoid probability strictly above 0.5."""
    if rgb.shape[:2] != depth.shape:
        raise ValueError(f"rgb {rgb.shape[:2]} and depth {depth.shape} disagree")
    if params.input_hw is not None and tuple(depth.shape) != tuple(params.input_hw):
        raise ValueError(
            f"checkpoint was trained at {params.input_hw}, got {depth.shape}; "
            "inputs are evaluated at native resolution only"
        )
    x = ad.Tensor(rgbd_input(rgb, depth, params.depth_range)[None])
    prob = ad.sigmoid(params.net(x)).data[0, 0]
    return prob > 0.5


def predict_probability(rgb: RgbImage, depth: DepthMap, params: SegParams) -> np.ndarray:
    """Soft segmenter output in (0, 1), before thresholding."""
    x = ad.Tensor(rgbd_input(rgb, depth, params.depth_range)[None])
    return ad.sigmoid(params.net(x)).data[0, 0]


def refine_region(mask: Mask) -> Mask:
    """7x7 median filter, then three passes of full 5x5 binary dilation."""
    out = kernels.median_filter7(np.ascontiguousarray(mask, dtype=bool))
    for _ in range(3):
        out = kernels.dilate5(out)
    return out


def finetune_joint(params: SegParams, frozen_inpainter, corpus: list[Sample],
                   cfg: SegTrainConfig, seed: int) -> SegParams:
    """Phase-two fine-tune: BCE plus the depth RMSE of a frozen inpainting stage.

    ``frozen_inpainter(sample) -> (optical_fill, base_depth)`` supplies, per
    sample, the inpainted depth over the whole image and the passthrough
    depth (raw with holes filled).  Both are treated as constants; the RMSE
    term reaches the segmenter through the soft composite
    ``p * optical_fill + (1 - p) * base_depth``.
    """
    if not corpus:
        raise TrainingError("empty fine-tuning corpus")
    xs = np.stack([rgbd_input(s.rgb, s.raw, cfg.depth_range) for s in corpus])
    ys = np.stack([s.optical_gt.astype(np.float32)[None] for s in corpus])
    fills = []
    bases = []
    gts = []
    for s in corpus:
        fill, base = frozen_inpainter(s)
        fills.append(np.asarray(fill, dtype=np.float32)[None])
        bases.append(np.asarray(base, dtype=np.float32)[None])
        gts.append(s.gt[None])
    fills = np.stack(fills)
    bases = np.stack(bases)
    gts = np.stack(gts)

    def rmse_term(logits: ad.Tensor, idx) -> ad.Tensor:
        p = ad.sigmoid(logits)
        composite = ad.add(ad.mul(p, fills[idx]), ad.mul(ad.sub(np.float32(1.0), p), bases[idx]))
        err = ad.sub(composite, gts[idx])
        return ad.mul(ad.sqrt(ad.mean(ad.mul(err, err))), cfg.rmse_weight)

    extra = rmse_term if cfg.rmse_weight != 0.0 else None
    _run_bce_loop(params, xs, ys, cfg, seed + 1, cfg.finetune_epochs, cfg.finetune_lr,
                  extra_loss=extra)
    return params


# -- checkpointing -------------------------------------------------------------


def save_seg_checkpoint(path, params: SegParams) -> None:
    arrays = params.net.state_arrays()
    arrays["meta.base_channels"] = np.array([params.base_channels], dtype=np.float32)
    arrays["meta.depth_range"] = np.array([params.depth_range], dtype=np.float32)
    if params.input_hw is not None:
        arrays["meta.input_hw"] = np.array(params.input_hw, dtype=np.float32)
    save_arrays(path, arrays)


def load_seg_checkpoint(path) -> SegParams:
    arrays = load_arrays(path)
    c = int(arrays.pop("meta.base_channels")[0])
    depth_range = float(arrays.pop("meta.depth_range")[0])
    hw = arrays.pop("meta.input_hw", None)
    net = SegNet(c, rng=make_rng(0, STREAM_INIT))
    net.load_state_arrays(arrays)
    return SegParams(net=net, base_channels=c, depth_range=depth_range,
                     input_hw=None if hw is None else (int(hw[0]), int(hw[1])))
