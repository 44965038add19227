"""Layer primitives with hand-written forward and backward passes.

Every layer owns a ``params`` dict, a ``grads`` dict with arrays of the
same shapes, and a single-use activation cache filled by ``forward`` and
consumed by ``backward``. Composite layers expose their parts through
``children()`` so models can address parameters by dotted names.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DataError, DimensionError, StateError

EPS = 1e-5
BN_MOMENTUM = 0.1

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class: parameter bookkeeping plus cache discipline."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def named_params(self, prefix: str = ""):
        """Yield ``(dotted_name, param, grad)`` across this layer and its children."""
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children():
            yield from child.named_params(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_modules(self, prefix: str = ""):
        """Yield ``(dotted_prefix, layer)`` for this layer and all descendants."""
        yield prefix, self
        for cname, child in self.children():
            yield from child.named_modules(f"{prefix}{cname}.")

    def num_params(self) -> int:
        return sum(p.size for _, p, _ in self.named_params())

    def astype(self, dtype) -> "Layer":
        for name in list(self.params):
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = np.zeros_like(self.params[name])
        for name in list(self.buffers):
            self.buffers[name] = self.buffers[name].astype(dtype)
        for _, child in self.children():
            child.astype(dtype)
        return self

    def _stash(self, *items) -> None:
        self._cache = items

    def _pop(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Conv2d(Layer):
    """Cross-correlation over NCHW input via im2col + GEMM."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0,
                 bias: bool = False, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride, self.pad = c_in, c_out, kernel, stride, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        self.add_param("weight", xavier_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, fan_out, dtype))
        if bias:
            self.add_param("bias", np.zeros(c_out, dtype=dtype))

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (self.c_out, conv_output_size(h, self.kernel, self.stride, self.pad),
                conv_output_size(w, self.kernel, self.stride, self.pad))

    def _pointwise(self) -> bool:
        return self.kernel == 1 and self.stride == 1 and self.pad == 0

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise DimensionError(f"conv expects {self.c_in} input channels, got {c}")
        k, s, p = self.kernel, self.stride, self.pad
        if h + 2 * p < k or w + 2 * p < k:
            raise DimensionError(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        _, ho, wo = self.output_shape(h, w)
        wmat = self.params["weight"].reshape(self.c_out, -1)
        if self._pointwise():
            cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ wmat.T
        if "bias" in self.params:
            out += self.params["bias"]
        self._stash(cols, x.shape)
        # logical NCHW view over channels-last storage; consumers accept any strides
        return out.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, (n, c, h, w) = self._pop()
        k, s, p = self.kernel, self.stride, self.pad
        _, _, ho, wo = dy.shape
        dym = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        wmat = self.params["weight"].reshape(self.c_out, -1)
        self.grads["weight"][...] = (dym.T @ cols).reshape(self.grads["weight"].shape)
        if "bias" in self.params:
            self.grads["bias"][...] = dym.sum(axis=0)
        dcols = dym @ wmat
        if self._pointwise():
            return dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dcols = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
        if p:
            dxp = dxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dxp)


def _normalize_backward(dxhat, xhat, inv_std, axes):
    """Backward of ``xhat = (x - mean) / std`` with statistics over ``axes``."""
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    out = xhat * m2
    np.subtract(dxhat, out, out=out)
    out -= m1
    out *= inv_std
    return out


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = EPS, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.stats_ready = False

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise DimensionError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        g = self.params["gamma"].reshape(1, -1, 1, 1)
        b = self.params["beta"].reshape(1, -1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = x.var(axis=(0, 2, 3), keepdims=True)
            count = x.size // self.channels
            unbiased = var.ravel() * (count / max(count - 1, 1))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - self.momentum
            rm += self.momentum * mean.ravel()
            rv *= 1 - self.momentum
            rv += self.momentum * unbiased
            self.stats_ready = True
        else:
            if not self.stats_ready:
                raise StateError("batchnorm in infer mode before any training update or loaded statistics")
            mean = self.buffers["running_mean"].reshape(1, -1, 1, 1)
            var = self.buffers["running_var"].reshape(1, -1, 1, 1)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._stash(xhat, inv_std, train)
        return xhat * g + b

    def backward(self, dy):
        xhat, inv_std, train = self._pop()
        self.grads["gamma"][...] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"][...] = dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.params["gamma"].reshape(1, -1, 1, 1)
        if not train:
            return dxhat * inv_std
        return _normalize_backward(dxhat, xhat, inv_std, (0, 2, 3))


class GroupAffineNorm(Layer):
    """Group normalization with one (gamma, beta) pair per group."""

    def __init__(self, channels: int, groups: int = 3, eps: float = EPS, dtype=np.float32):
        super().__init__()
        if channels % groups:
            raise DimensionError(f"{channels} channels not divisible into {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.add_param("gamma", np.ones(groups, dtype=dtype))
        self.add_param("beta", np.zeros(groups, dtype=dtype))

    # Works on a channels-last view (N, H*W, groups, C/groups): free for
    # channels-last storage, a copy otherwise.
    def _grouped(self, x):
        n, c, h, w = x.shape
        return x.transpose(0, 2, 3, 1).reshape(n, h * w, self.groups, c // self.groups)

    @staticmethod
    def _ungrouped(xg, shape):
        n, c, h, w = shape
        return xg.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise DimensionError(f"group norm expects {self.channels} channels, got {x.shape[1]}")
        xg = self._grouped(x)
        xhat = xg - xg.mean(axis=(1, 3), keepdims=True)
        var = np.einsum("npgk,npgk->ng", xhat, xhat)[:, None, :, None] / (xg.shape[1] * xg.shape[3])
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat *= inv_std
        self._stash(xhat, inv_std, x.shape)
        out = xhat * self.params["gamma"].reshape(1, 1, -1, 1)
        out += self.params["beta"].reshape(1, 1, -1, 1)
        return self._ungrouped(out, x.shape)

    def backward(self, dy):
        xhat, inv_std, shape = self._pop()
        dyg = self._grouped(dy)
        self.grads["gamma"][...] = np.einsum("npgk,npgk->g", dyg, xhat)
        self.grads["beta"][...] = dyg.sum(axis=(0, 1, 3))
        dxhat = dyg * self.params["gamma"].reshape(1, 1, -1, 1)
        return self._ungrouped(_normalize_backward(dxhat, xhat, inv_std, (1, 3)), shape)


class LayerNormTokens(Layer):
    """Per-token normalization over the trailing channel axis."""

    def __init__(self, d: int, eps: float = EPS, dtype=np.float32):
        super().__init__()
        self.d, self.eps = d, eps
        self.add_param("gamma", np.ones(d, dtype=dtype))
        self.add_param("beta", np.zeros(d, dtype=dtype))

    def forward(self, x, train=True):
        if x.shape[-1] != self.d:
            raise DimensionError(f"layernorm expects width {self.d}, got {x.shape[-1]}")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._stash(xhat, inv_std)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy):
        xhat, inv_std = self._pop()
        lead = tuple(range(dy.ndim - 1))
        self.grads["gamma"][...] = (dy * xhat).sum(axis=lead)
        self.grads["beta"][...] = dy.sum(axis=lead)
        return _normalize_backward(dy * self.params["gamma"], xhat, inv_std, (-1,))


class Linear(Layer):
    """Per-token affine map ``y = x @ W (+ b)`` with ``W`` stored as (din, dout)."""

    def __init__(self, din: int, dout: int, bias: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.din, self.dout = din, dout
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("weight", xavier_uniform(rng, (din, dout), din, dout, dtype))
        if bias:
            self.add_param("bias", np.zeros(dout, dtype=dtype))

    def forward(self, x, train=True):
        if x.shape[-1] != self.din:
            raise DimensionError(f"linear expects width {self.din}, got {x.shape[-1]}")
        x2 = x.reshape(-1, self.din)
        out = T.matmul(x2, self.params["weight"])
        if "bias" in self.params:
            out += self.params["bias"]
        self._stash(x2, x.shape)
        return out.reshape(*x.shape[:-1], self.dout)

    def backward(self, dy):
        x2, shape = self._pop()
        dy2 = dy.reshape(-1, self.dout)
        self.grads["weight"][...] = x2.T @ dy2
        if "bias" in self.params:
            self.grads["bias"][...] = dy2.sum(axis=0)
        return (dy2 @ self.params["weight"].T).reshape(shape)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


class GELU(Layer):
    """tanh-approximated GeLU."""

    def forward(self, x, train=True):
        t = x * x
        t *= _GELU_A
        t += 1.0
        t *= x
        t *= _GELU_C
        np.tanh(t, out=t)
        self._stash(x, t)
        out = t + 1.0
        out *= x
        out *= 0.5
        return out

    def backward(self, dy):
        x, t = self._pop()
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        inner = x * x
        inner *= 3.0 * _GELU_A * _GELU_C
        inner += _GELU_C
        inner *= x
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        inner *= sech2
        inner += t
        inner += 1.0
        inner *= 0.5
        inner *= dy
        return inner


class ReLU(Layer):
    def forward(self, x, train=True):
        mask = x > 0
        self._stash(mask)
        return x * mask

    def backward(self, dy):
        (mask,) = self._pop()
        return dy * mask


def pool_output_size(size: int, kernel: int, stride: int, rounding: str) -> int:
    if rounding == "floor":
        return (size - kernel) // stride + 1
    if rounding == "ceil":
        return -(-(size - kernel) // stride) + 1
    raise ValueError(f"unknown rounding {rounding!r}")


def _axis_slice(ndim: int, axis: int, sl: slice) -> tuple:
    return (slice(None),) * (axis % ndim) + (sl,)


def _pool_axis(x, kernel, stride, n_out, axis):
    """1-D max over windows along ``axis``; argmax ties go to the lowest offset."""
    views = [x[_axis_slice(x.ndim, axis, slice(i, i + stride * (n_out - 1) + 1, stride))]
             for i in range(kernel)]
    out = views[0].copy(order="K")
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # argmax = number of leading offsets that are not the maximum
    missed = views[0] != out
    arg = missed.astype(np.int8)
    for v in views[1:-1]:
        missed &= v != out
        arg += missed
    return out, arg


def _zeros_like_layout(shape, ref):
    """Zeros of ``shape`` (NCHW), channels-last in memory when ``ref`` is."""
    if ref.ndim == 4 and ref.strides[1] == ref.itemsize and ref.shape[1] > 1:
        n, c, h, w = shape
        return np.zeros((n, h, w, c), dtype=ref.dtype).transpose(0, 3, 1, 2)
    return np.zeros(shape, dtype=ref.dtype)


def _unpool_axis(g, arg, kernel, stride, in_shape, axis):
    dx = _zeros_like_layout(in_shape, g)
    n_out = g.shape[axis]
    for i in range(kernel):
        sl = _axis_slice(g.ndim, axis, slice(i, i + stride * (n_out - 1) + 1, stride))
        dx[sl] += g * (arg == i)
    return dx


class MaxPool2d(Layer):
    """Max pooling; ceil mode clips the trailing windows to valid input.

    Pooling is done separably (columns, then rows). Taking the lowest row
    that holds the window maximum and then the lowest column within it
    selects the lowest raster index, so backward routing is unchanged.
    """

    def __init__(self, kernel: int = 3, stride: int = 2, rounding: str = "floor"):
        super().__init__()
        if rounding not in ("floor", "ceil"):
            raise ValueError(f"unknown rounding {rounding!r}")
        self.kernel, self.stride, self.rounding = kernel, stride, rounding

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (pool_output_size(h, self.kernel, self.stride, self.rounding),
                pool_output_size(w, self.kernel, self.stride, self.rounding))

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        if k > h or k > w:
            raise DimensionError(f"pool kernel {k} larger than input {h}x{w}")
        ho, wo = self.output_hw(h, w)
        ph, pw = max((ho - 1) * s + k - h, 0), max((wo - 1) * s + k - w, 0)
        xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf) if ph or pw else x
        cols, arg_w = _pool_axis(xp, k, s, wo, axis=3)
        out, arg_h = _pool_axis(cols, k, s, ho, axis=2)
        self._stash(arg_w, arg_h, x.shape, xp.shape, cols.shape)
        return out

    def backward(self, dy):
        arg_w, arg_h, shape, pshape, cshape = self._pop()
        k, s = self.kernel, self.stride
        dcols = _unpool_axis(dy, arg_h, k, s, cshape, axis=2)
        dxp = _unpool_axis(dcols, arg_w, k, s, pshape, axis=3)
        if pshape != shape:
            dxp = dxp[:, :, :shape[2], :shape[3]]
        return dxp


class GlobalAvgPool(Layer):
    """Spatial mean: NCHW -> (N, C)."""

    def forward(self, x, train=True):
        self._stash(x.shape)
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        (shape,) = self._pop()
        n, c, h, w = shape
        return np.broadcast_to((dy / (h * w))[:, :, None, None], shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``logits`` (N, K) against integer ``labels``.

    Returns the scalar loss and ``dloss/dlogits = (softmax - onehot) / N``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n
