"""Momentum SGD and finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, set_finite_checks
from .layers import Parameter


class GradientError(ValueError):
    """Raised when an update is refused (non-finite or missing gradient)."""


@dataclass
class OptimState:
    """Hyperparameters plus one momentum buffer per registered parameter.

    Update rule (weight decay folded into the velocity):

        v <- momentum * v + g + weight_decay * p
        p <- p - lr * v
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: list[Parameter], state: OptimState) -> None:
    """One momentum-SGD update over ``params``; refuses non-finite gradients."""
    for p in params:
        g = p.grad
        if g is None:
            raise GradientError(f"parameter '{p.name}' has no gradient")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter '{p.name}'; step refused")
    for p in params:
        g = p.grad
        v = state.buffers.get(id(p))
        if v is None:
            v = np.zeros_like(p.value)
        v = (state.momentum * v + g + state.weight_decay * p.value).astype(p.value.dtype, copy=False)
        state.buffers[id(p)] = v
        p.tensor.data = (p.value - state.lr * v).astype(p.value.dtype, copy=False)


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.reset_grad()


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients together so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.  No-op when already within bounds.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.tensor.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm


def grad_check(f, leaves: list[Tensor], eps: float | None = None,
               n_samples: int = 6, rng: np.random.Generator | None = None,
               min_mag_quantile: float = 0.5, kink_filter: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the current leaf values to a scalar Tensor and must be a
    pure function of them.  ``eps`` defaults to 3e-3 for float32 leaves
    and 1e-6 for float64.  Coordinates are subsampled when a leaf has
    more than ``n_samples`` entries; sampling is restricted to entries
    whose analytic gradient magnitude is at or above the leaf median
    (tunable via ``min_mag_quantile``), so float32 forward rounding noise
    (which swamps near-zero components) does not mask real errors in the
    components that matter.  Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).

    ``kink_filter`` skips coordinates where the one-sided differences
    disagree by more than 30%: those sit on a ReLU kink or pooling tie,
    where no finite difference is meaningful (the symmetric difference
    averages two slopes while the analytic value picks one subgradient).
    A genuinely wrong analytic gradient still fails, because at smooth
    points the one-sided differences agree with each other while
    disagreeing with the analytic value.
    """
    if eps is None:
        eps = 1e-6 if all(t.data.dtype == np.float64 for t in leaves) else 3e-3
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"epsilon {eps} outside [1e-6, 1e-2]")
    rng = rng or np.random.default_rng(0)

    for t in leaves:
        t.zero_grad()
    set_finite_checks(True)
    try:
        loss = f()
        loss.backward()
        loss0 = float(loss.data)
        analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in leaves]

        worst = 0.0
        for t, a in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            size = flat.shape[0]
            if size == 1:
                coords = np.arange(1)
            else:
                mags = np.abs(a.reshape(-1))
                eligible = np.flatnonzero(mags >= np.quantile(mags, min_mag_quantile))
                if eligible.size == 0:
                    eligible = np.arange(size)
                coords = (eligible if eligible.size <= n_samples else
                          rng.choice(eligible, size=n_samples, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                hi = float(f().data)
                flat[c] = orig - eps
                lo = float(f().data)
                flat[c] = orig
                fd = (hi - lo) / (2 * eps)
                if kink_filter:
                    fwd = (hi - loss0) / eps
                    bwd = (loss0 - lo) / eps
                    if abs(fwd - bwd) > 0.3 * max(abs(fwd), abs(bwd), 1e-8):
                        continue  # non-smooth point: no finite difference applies
                av = float(a.reshape(-1)[c])
                rel = abs(av - fd) / max(abs(av), abs(fd), 1e-8)
                worst = max(worst, rel)
    finally:
        set_finite_checks(False)
        for t in leaves:
            t.zero_grad()
    return worst
