"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the layer set the networks in this package need:
convolution, 2x2 max pooling, 2x2 up-convolution, ReLU, sigmoid,
linear projection, softmax attention, elementwise algebra with
broadcasting, reductions, concatenation, and a straight-through
codebook lookup.  Tensors are immutable once produced by an op;
gradients accumulate on leaves after ``backward()``.

Storage is float32 by default; build leaf tensors as float64 for
high-precision gradient checking.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand dimensions cannot be reconciled."""


class NonFiniteError(FloatingPointError):
    """Raised by the finite-check mode when an op produces NaN/inf."""


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Globally toggle per-op finiteness validation (slow, for debugging)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values produced by op '{op}'")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients of this (scalar) tensor w.r.t. all leaves."""
        if grad is None:
            if self.data.ndim != 0:
                raise ShapeError(f"backward() without seed needs a scalar, got {self.data.shape}")
            grad = np.ones((), dtype=self.data.dtype)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Grads are never mutated in place, so aliasing the incoming array is safe.
    if not (t.requires_grad or t._parents):
        return
    t.grad = g if t.grad is None else t.grad + g


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; a bare scalar/array adopts the Tensor operand's dtype
    so float32 graphs are not silently promoted to float64."""
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    if at and not bt:
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if bt and not at:
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise algebra ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor(a.data + b.data, _parents=(a, b), op="add")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor(a.data - b.data, _parents=(a, b), op="sub")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor(a.data * b.data, _parents=(a, b), op="mul")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor(a.data / b.data, _parents=(a, b), op="div")

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bwd
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, _parents=(a,), op="neg")
    out._backward = lambda g: _accumulate(a, -g)
    return out


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data**p, _parents=(a,), op="pow")
    out._backward = lambda g: _accumulate(a, g * p * a.data ** (p - 1))
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)
    out = Tensor(root, _parents=(a,), op="sqrt")
    out._backward = lambda g: _accumulate(a, g * 0.5 / root)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e, _parents=(a,), op="exp")
    out._backward = lambda g: _accumulate(a, g * e)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data), _parents=(a,), op="log")
    out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0), _parents=(a,), op="relu")
    out._backward = lambda g: _accumulate(a, np.where(mask, g, 0))
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable two-sided logistic
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)), np.exp(a.data) / (1.0 + np.exp(a.data)))
    s = s.astype(a.data.dtype)
    out = Tensor(s, _parents=(a,), op="sigmoid")
    out._backward = lambda g: _accumulate(a, g * s * (1.0 - s))
    return out


def stopgrad(a) -> Tensor:
    """Value of ``a`` detached from the graph."""
    a = _as_tensor(a)
    return Tensor(a.data, op="stopgrad")


def cast(a, dtype) -> Tensor:
    """Dtype conversion; gradients convert back on the way down."""
    a = _as_tensor(a)
    out = Tensor(a.data.astype(dtype), _parents=(a,), op="cast")
    out._backward = lambda g: _accumulate(a, g.astype(a.data.dtype))
    return out


def straight_through(value, carrier) -> Tensor:
    """Forward ``value``'s data bit-exactly; route gradients to ``carrier``."""
    value, carrier = _as_tensor(value), _as_tensor(carrier)
    if value.data.shape != carrier.data.shape:
        raise ShapeError(f"straight_through shapes differ: {value.shape} vs {carrier.shape}")
    out = Tensor(value.data, _parents=(value, carrier), op="straight_through")
    out._backward = lambda g: _accumulate(carrier, g)
    return out


# -- reductions and reshaping -----------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), op="sum")

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    out._backward = bwd
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,), op="reshape")
    out._backward = lambda g: _accumulate(a, g.reshape(a.data.shape))
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), _parents=(a,), op="transpose")
    out._backward = lambda g: _accumulate(a, g.transpose(inv))
    return out


def upsample_nearest(x, k: int) -> Tensor:
    """Repeat each spatial cell of an NCHW tensor into a k x k block."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    y = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    out = Tensor(y, _parents=(x,), op="upsample_nearest")

    def bwd(g):
        _accumulate(x, g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)))

    out._backward = bwd
    return out


_BILERP_CACHE: dict[int, np.ndarray] = {}


def _bilerp_matrix(h: int) -> np.ndarray:
    """(2h, h) row-interpolation matrix, edges replicated."""
    if h not in _BILERP_CACHE:
        u = np.zeros((2 * h, h))
        for i in range(h):
            u[2 * i, i] += 0.75
            u[2 * i, max(i - 1, 0)] += 0.25
            u[2 * i + 1, i] += 0.75
            u[2 * i + 1, min(i + 1, h - 1)] += 0.25
        _BILERP_CACHE[h] = u
    return _BILERP_CACHE[h]


def bilinear_up2(x) -> Tensor:
    """Separable 2x bilinear upsampling of an NCHW tensor."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    uh = _bilerp_matrix(h).astype(x.data.dtype)
    uw = _bilerp_matrix(w).astype(x.data.dtype)
    y = np.einsum("ab,ncbd,ed->ncae", uh, x.data, uw, optimize=True)
    out = Tensor(y, _parents=(x,), op="bilinear_up2")

    def bwd(g):
        _accumulate(x, np.einsum("ab,ncae,ed->ncbd", uh, g, uw, optimize=True))

    out._backward = bwd
    return out


def avgpool(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling of an NCHW tensor."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool needs dims divisible by {k}, got {h}x{w}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = Tensor(y, _parents=(x,), op="avgpool")

    def bwd(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accumulate(x, gg.astype(x.data.dtype))

    out._backward = bwd
    return out


def slice_channels(x, start: int, stop: int) -> Tensor:
    """Channel slice x[:, start:stop] of an NCHW tensor."""
    x = _as_tensor(x)
    out = Tensor(x.data[:, start:stop], _parents=(x,), op="slice_channels")

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[:, start:stop] = g
        _accumulate(x, buf)

    out._backward = bwd
    return out


def concat(parts, axis=1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), op="concat")
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accumulate(p, g[tuple(sl)])
            start += n

    out._backward = bwd
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2D x 2D or batched 3D x 3D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul wants matching 2D or 3D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), op="matmul")

    def bwd(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    out._backward = bwd
    return out


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s.astype(a.data.dtype), _parents=(a,), op="softmax")

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, (s * (g - dot)).astype(a.data.dtype))

    out._backward = bwd
    return out


def embed(codebook, idx) -> Tensor:
    """Row lookup ``codebook[idx]``; gradients scatter-add into the codebook."""
    codebook = _as_tensor(codebook)
    idx = np.asarray(idx)
    out = Tensor(codebook.data[idx], _parents=(codebook,), op="embed")

    def bwd(g):
        buf = np.zeros_like(codebook.data)
        np.add.at(buf, idx, g)
        _accumulate(codebook, buf)

    out._backward = bwd
    return out


# -- structured layers --------------------------------------------------------


def conv2d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCHW input with OCkk kernels, zero padding.

    ``bias`` is an optional (O,) tensor added per output channel.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d wants NCHW and OCkk operands, got {x.shape} and {w.shape}")
    n, c, h, wid = x.data.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be {oh}x{ow} for input {h}x{wid}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    y = kernels.conv2d_fwd(xp, w.data, stride)
    parents = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        y = y + bias.data.reshape(1, -1, 1, 1)
        parents = (x, w, bias)
    out = Tensor(y, _parents=parents, op="conv2d")

    def bwd(g):
        g = np.ascontiguousarray(g)
        if bias is not None and (bias.requires_grad or bias._parents):
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if w.requires_grad or w._parents:
            _accumulate(w, kernels.conv2d_bwd_kernel(xp, g, stride, kh, kw))
        if x.requires_grad or x._parents:
            dxp = kernels.conv2d_bwd_input(g, w.data, stride, xp.shape[2], xp.shape[3])
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dxp)

    out._backward = bwd
    return out


def channel_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Per-sample, per-channel spatial normalization with learned affine.

    Fused forward/backward (one op instead of a dozen), since this sits
    in every network block.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n, c, h, w = x.data.shape
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gain.data.reshape(1, c, 1, 1)
    y = xhat * g4 + bias.data.reshape(1, c, 1, 1)
    out = Tensor(y.astype(x.data.dtype), _parents=(x, gain, bias), op="channel_norm")

    def bwd(g):
        if bias.requires_grad or bias._parents:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if gain.requires_grad or gain._parents:
            _accumulate(gain, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            gy = g * g4
            m1 = gy.mean(axis=(2, 3), keepdims=True)
            m2 = (gy * xhat).mean(axis=(2, 3), keepdims=True)
            _accumulate(x, (inv * (gy - m1 - xhat * m2)).astype(x.data.dtype))

    out._backward = bwd
    return out


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2; gradient routes to the first argmax."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    y, idx = kernels.maxpool2_fwd(x.data)
    out = Tensor(y, _parents=(x,), op="maxpool2x2")
    out._backward = lambda g: _accumulate(x, kernels.maxpool2_bwd(np.ascontiguousarray(g), idx))
    return out


def upconv2x2(x, w) -> Tensor:
    """2x2 stride-2 transposed convolution; kernel layout (Cin, Cout, 2, 2)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"upconv2x2 channel mismatch: {x.shape} vs kernel {w.shape}")
    y = kernels.upconv2_fwd(x.data, w.data)
    out = Tensor(y, _parents=(x, w), op="upconv2x2")

    def bwd(g):
        g = np.ascontiguousarray(g)
        if w.requires_grad or w._parents:
            _accumulate(w, kernels.upconv2_bwd_kernel(x.data, g))
        if x.requires_grad or x._parents:
            _accumulate(x, kernels.upconv2_bwd_input(g, w.data))

    out._backward = bwd
    return out


def single_query_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for one query row against n key/value rows.

    Accepts (1, d) with (n, d), or batched (N, 1, d) with (N, n, d).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if k.data.ndim not in (2, 3) or q.data.ndim != k.data.ndim or v.data.ndim != k.data.ndim:
        raise ShapeError(f"attention rank mismatch: q {q.shape}, keys {k.shape}, values {v.shape}")
    n, d = k.data.shape[-2], k.data.shape[-1]
    if n < 1:
        raise ShapeError("attention needs at least one key/value row")
    if q.data.shape[-1] != d or v.data.shape[-1] != d or v.data.shape[-2] != n:
        raise ShapeError(f"attention dims disagree: q {q.shape}, keys {k.shape}, values {v.shape}")
    scores = mul(matmul(q, transpose(k, (1, 0) if k.data.ndim == 2 else (0, 2, 1))), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def attention_weights(q, k) -> np.ndarray:
    """The softmax weights the attention op would use (for diagnostics)."""
    q, k = _as_tensor(q), _as_tensor(k)
    d = k.data.shape[-1]
    scores = (q.data @ k.data.swapaxes(-1, -2)) / np.sqrt(d)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy from logits, numerically stable."""
    logits = _as_tensor(logits)
    t = np.asarray(target, dtype=logits.data.dtype)
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(loss.mean(), dtype=z.dtype), _parents=(logits,), op="bce")

    def bwd(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        _accumulate(logits, (g * (s - t) / z.size).astype(z.dtype))

    out._backward = bwd
    return out


def mse(a, b) -> Tensor:
    d = sub(_as_tensor(a), _as_tensor(b))
    return mean(mul(d, d))
