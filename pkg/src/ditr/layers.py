"""Trainable layer primitives built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    channel_norm,
    conv2d,
    matmul,
    mean,
    reshape,
    single_query_attention,
    transpose,
    upconv2x2,
)


class Parameter:
    """Named trainable value with a shape-matched gradient slot."""

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.asarray(data), requires_grad=trainable)
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, data: np.ndarray) -> None:
        self.tensor.data = np.asarray(data, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def reset_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class Module:
    """Base for parameter containers; collects parameters by attribute path."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for attr, obj in self.__dict__.items():
            path = f"{prefix}{attr}"
            if isinstance(obj, Parameter):
                out.append((path, obj))
            elif isinstance(obj, Module):
                out.extend(obj.named_params(path + "."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Parameter):
                        out.append((f"{path}.{i}", item))
                    elif isinstance(item, Module):
                        out.extend(item.named_params(f"{path}.{i}."))
        return out

    def params(self) -> list[Parameter]:
        return [p for _, p in self.named_params()]

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params() if p.trainable]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_params()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = dict(self.named_params())
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, p in named.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.value.shape):
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {p.value.shape}")
            p.value = arr


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True,
                 rng=None, dtype=np.float32, init_scale=1.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        w = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        if init_scale != 1.0:
            w = (w * init_scale).astype(dtype)
        self.w = Parameter("w", w)
        self.b = Parameter("b", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        bias = None if self.b is None else self.b.tensor
        return conv2d(x, self.w.tensor, bias=bias, stride=self.stride, padding=self.padding)


class ConvTranspose2x2(Module):
    """2x2 stride-2 up-convolution (learned upsampling)."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.w = Parameter("w", he_normal(rng, (cin, cout, 2, 2), cin * 4, dtype))
        self.b = Parameter("b", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(upconv2x2(x, self.w.tensor), reshape(self.b.tensor, (1, -1, 1, 1)))


class Linear(Module):
    def __init__(self, din, dout, rng, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((din, dout), dtype=dtype)
        else:
            w = (rng.standard_normal((din, dout)) * np.sqrt(1.0 / din)).astype(dtype)
        self.w = Parameter("w", w)
        self.b = Parameter("b", np.zeros(dout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w.tensor), self.b.tensor)


class ChannelNorm(Module):
    """Per-sample, per-channel normalization over spatial positions."""

    def __init__(self, channels, dtype=np.float32, eps=1e-5):
        self.eps = eps
        self.gain = Parameter("gain", np.ones(channels, dtype=dtype))
        self.bias = Parameter("bias", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return channel_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


class GlobalAttention(Module):
    """Single-query attention over spatial positions of a feature map.

    Keys and values come from 1x1 projections of the map; the query is a
    projection of a pooled vector (the map itself for self-attention, an
    external conditioning vector for cross-attention).  The attended
    vector is projected and broadcast-added back onto every position.
    """

    def __init__(self, channels, query_dim=None, rng=None, dtype=np.float32):
        qd = channels if query_dim is None else query_dim
        self.q_proj = Linear(qd, channels, rng, dtype)
        self.k_proj = Conv2d(channels, channels, k=1, padding=0, bias=False, rng=rng, dtype=dtype)
        self.v_proj = Conv2d(channels, channels, k=1, padding=0, bias=False, rng=rng, dtype=dtype)
        self.out_proj = Linear(channels, channels, rng, dtype, zero_init=True)

    def __call__(self, x: Tensor, query_source: Tensor | None = None) -> Tensor:
        n, c, h, w = x.data.shape
        if query_source is None:
            query_source = mean(x, axis=(2, 3))
        q = reshape(self.q_proj(query_source), (n, 1, c))
        k = transpose(reshape(self.k_proj(x), (n, c, h * w)), (0, 2, 1))
        v = transpose(reshape(self.v_proj(x), (n, c, h * w)), (0, 2, 1))
        att = single_query_attention(q, k, v)
        out = self.out_proj(reshape(att, (n, c)))
        return add(x, reshape(out, (n, c, 1, 1)))


def sinusoidal_embedding(t: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position code for an integer timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)
