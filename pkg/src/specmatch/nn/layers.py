"""Layer descriptors and their forward/backward kernels.

Activations are ``(batch, channels, length)`` for the convolutional part and
``(batch, features)`` after :class:`Flatten`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, NoForwardCache, ShapeMismatch

__all__ = [
    "Conv",
    "BatchNorm",
    "LeakyReLU",
    "MaxPool",
    "Dense",
    "Flatten",
    "conv1d_forward",
    "conv1d_backward",
    "batchnorm_forward",
    "leakyrelu_forward",
    "maxpool_forward",
    "maxpool_backward",
    "dense_forward",
    "build_layer",
]


# --------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if min(self.filters, self.kernel, self.stride) < 1:
            raise ValueError(f"invalid {self}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5
    momentum: float = 0.9


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 0.01

    def __post_init__(self):
        if not 0 < self.slope < 1:
            raise ValueError("LeakyReLU slope must lie in (0, 1)")


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2

    def __post_init__(self):
        if min(self.kernel, self.stride) < 1:
            raise ValueError(f"invalid {self}")


@dataclass(frozen=True)
class Dense:
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("Dense needs at least one unit")


@dataclass(frozen=True)
class Flatten:
    pass


# --------------------------------------------------------------------------
# kernels


def _same_pads(length, kernel, stride):
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def conv_output_length(length, kernel, stride=1, padding="valid"):
    if padding == "same":
        return -(-length // stride)
    return (length - kernel) // stride + 1


def _im2col(x, kernel, stride):
    windows = sliding_window_view(x, kernel, axis=2)[:, :, ::stride]
    b, c, lo, k = windows.shape
    return np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(b * lo, c * k), lo


def conv1d_forward(x, weights, bias, stride=1, padding="valid", return_cache=False):
    """Cross-correlation ``out[b,m,i] = bias[m] + sum_{c,k} w[m,c,k] x[b,c,i*stride+k]``.

    Parameters
    ----------
    x : ndarray, shape (B, C, L)
    weights : ndarray, shape (M, C, K)
    bias : ndarray, shape (M,)
    """
    if x.ndim != 3 or weights.ndim != 3 or x.shape[1] != weights.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs weights {weights.shape}")
    m, c, k = weights.shape
    pads = (0, 0)
    if padding == "same":
        pads = _same_pads(x.shape[2], k, stride)
        x = np.pad(x, ((0, 0), (0, 0), pads))
    if k > x.shape[2]:
        raise ShapeMismatch(f"conv1d: kernel {k} longer than input {x.shape[2]}")
    b = x.shape[0]
    cols, lo = _im2col(x, k, stride)
    out = (cols @ weights.reshape(m, c * k).T + bias).reshape(b, lo, m).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    if return_cache:
        return out, (cols, x.shape, pads, stride)
    return out


def conv1d_backward(grad, weights, cache):
    """Gradients ``(dx, dw, db)`` of :func:`conv1d_forward`."""
    cols, padded_shape, pads, stride = cache
    m, c, k = weights.shape
    b, _, lo = grad.shape
    # channel-major gradient; columns ordered (batch, position) like ``cols``
    gm = np.ascontiguousarray(grad.transpose(1, 0, 2)).reshape(m, b * lo)
    dw = (gm @ cols).reshape(m, c, k)
    db = gm.sum(axis=1)
    per_tap = (weights.transpose(2, 1, 0).reshape(k * c, m) @ gm).reshape(k, c, b, lo)
    dx = np.zeros((c, b, padded_shape[2]), dtype=grad.dtype)
    stop = stride * (lo - 1) + 1
    for j in range(k):
        dx[:, :, j : j + stop : stride] += per_tap[j]
    dx = dx.transpose(1, 0, 2)
    if pads != (0, 0):
        dx = dx[:, :, pads[0] : padded_shape[2] - pads[1]]
    return np.ascontiguousarray(dx), dw, db


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2)


def _bn_view(v, x):
    return v if x.ndim == 2 else v[None, :, None]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, eps=1e-5,
                      momentum=0.9, return_cache=False):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``momentum * old + (1 -
    momentum) * batch`` (unbiased variance). In eval mode only the running
    statistics are read.
    """
    axes = _bn_axes(x)
    if train:
        n = x.size // x.shape[1]
        if n < 2:
            raise DegenerateBatch(f"batch norm needs >= 2 values per channel, got {n}")
        mean = x.sum(axis=axes) / n
        xhat = x - _bn_view(mean, x)
        out = np.multiply(xhat, xhat)
        var = out.sum(axis=axes) / n
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / (n - 1))
    else:
        var = running_var
        xhat = x - _bn_view(running_mean, x)
        out = np.empty_like(xhat)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= _bn_view(inv_std, x)
    np.multiply(xhat, _bn_view(gamma, x), out=out)
    out += _bn_view(beta, x)
    if return_cache:
        return out, (xhat, inv_std)
    return out


def batchnorm_backward(grad, gamma, cache):
    xhat, inv_std = cache
    axes = _bn_axes(grad)
    n = grad.size // grad.shape[1]
    dbeta = grad.sum(axis=axes)
    dx = grad * xhat
    dgamma = dx.sum(axis=axes)
    # dx = gamma * inv_std / n * (n * grad - dbeta - xhat * dgamma)
    np.multiply(xhat, _bn_view(dgamma, grad), out=dx)
    dx += _bn_view(dbeta, grad)
    np.subtract(n * grad, dx, out=dx)
    dx *= _bn_view(gamma * inv_std / n, grad)
    return dx, dgamma, dbeta


def leakyrelu_forward(x, slope=0.01):
    if 0 <= slope <= 1:
        return np.maximum(x, slope * x)
    return np.where(x >= 0, x, slope * x)


def _pool_taps(x, kernel, stride, lo):
    """View ``j`` holds element ``j`` of every pooling window."""
    stop = stride * (lo - 1) + 1
    return [x[:, :, j : j + stop : stride] for j in range(kernel)]


def maxpool_forward(x, kernel=2, stride=2):
    """Window maxima and the in-window offset of each maximum (lowest index
    on ties)."""
    if x.ndim != 3 or kernel > x.shape[2]:
        raise ShapeMismatch(f"maxpool kernel {kernel} does not fit input {x.shape}")
    lo = (x.shape[2] - kernel) // stride + 1
    taps = _pool_taps(x, kernel, stride, lo)
    # running comparison over strided views; strict ``>`` keeps the lowest
    # index on ties
    out = taps[0].copy()
    arg = np.zeros(out.shape, dtype=np.int8 if kernel < 128 else np.int64)
    for j in range(1, kernel):
        better = np.greater(taps[j], out)
        np.maximum(out, taps[j], out=out)
        if j == 1:
            arg = better.astype(arg.dtype)
        else:
            np.copyto(arg, j, where=better)
    return out, arg


def maxpool_backward(grad, arg, input_length, kernel=2, stride=2):
    b, c, lo = grad.shape
    dx = np.zeros((b, c, input_length), dtype=grad.dtype)
    for j, tap in enumerate(_pool_taps(dx, kernel, stride, lo)):
        if kernel <= stride:
            np.multiply(grad, arg == j, out=tap)
        else:
            tap += grad * (arg == j)
    return dx


def dense_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weights {w.shape}")
    return x @ w + b


# --------------------------------------------------------------------------
# stateful layers used by Network


class Layer:
    """Runtime layer: owns parameters, gradients and the activation cache."""

    spec = None
    param_names: tuple = ()
    buffer_names: tuple = ()

    def __init__(self, spec, in_shape, dtype):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.dtype = dtype
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    @property
    def out_shape(self):
        return self.in_shape

    def fans(self):
        return None

    def _need_cache(self):
        if self._cache is None:
            raise NoForwardCache(f"{type(self.spec).__name__}: backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache


class ConvLayer(Layer):
    param_names = ("weight", "bias")

    def __init__(self, spec, in_shape, dtype):
        super().__init__(spec, in_shape, dtype)
        c, _ = in_shape
        self.params["weight"] = np.zeros((spec.filters, c, spec.kernel), dtype)
        self.params["bias"] = np.zeros(spec.filters, dtype)

    @property
    def out_shape(self):
        _, length = self.in_shape
        s = self.spec
        return (s.filters, conv_output_length(length, s.kernel, s.stride, s.padding))

    def fans(self):
        c = self.in_shape[0]
        return c * self.spec.kernel, self.spec.filters * self.spec.kernel

    def forward(self, x, train):
        s = self.spec
        out, cache = conv1d_forward(x, self.params["weight"], self.params["bias"], s.stride, s.padding, True)
        self._cache = cache if train else None
        return out

    def backward(self, grad):
        dx, dw, db = conv1d_backward(grad, self.params["weight"], self._need_cache())
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx


class BatchNormLayer(Layer):
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, spec, in_shape, dtype):
        super().__init__(spec, in_shape, dtype)
        c = in_shape[0]
        self.params["gamma"] = np.ones(c, dtype)
        self.params["beta"] = np.zeros(c, dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype)
        self.buffers["running_var"] = np.ones(c, dtype)

    def forward(self, x, train):
        s = self.spec
        out, cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, s.eps, s.momentum, return_cache=True,
        )
        self._cache = cache if train else None
        return out

    def backward(self, grad):
        dx, dg, db = batchnorm_backward(grad, self.params["gamma"], self._need_cache())
        self.grads["gamma"], self.grads["beta"] = dg, db
        return dx


class LeakyReLULayer(Layer):
    def forward(self, x, train):
        self._cache = (x >= 0) if train else None
        return leakyrelu_forward(x, self.spec.slope)

    def backward(self, grad):
        pos = self._need_cache()
        slope = self.spec.slope
        # grad * (slope + (1 - slope) * pos) without a float mask array
        out = np.multiply(grad, pos)
        out *= grad.dtype.type(1 - slope)
        out += grad.dtype.type(slope) * grad
        return out


class MaxPoolLayer(Layer):
    @property
    def out_shape(self):
        c, length = self.in_shape
        return (c, (length - self.spec.kernel) // self.spec.stride + 1)

    def forward(self, x, train):
        out, arg = maxpool_forward(x, self.spec.kernel, self.spec.stride)
        self._cache = (arg, x.shape[2]) if train else None
        return out

    def backward(self, grad):
        arg, length = self._need_cache()
        return maxpool_backward(grad, arg, length, self.spec.kernel, self.spec.stride)


class DenseLayer(Layer):
    param_names = ("weight", "bias")

    def __init__(self, spec, in_shape, dtype):
        super().__init__(spec, in_shape, dtype)
        (f,) = in_shape
        self.params["weight"] = np.zeros((f, spec.units), dtype)
        self.params["bias"] = np.zeros(spec.units, dtype)

    @property
    def out_shape(self):
        return (self.spec.units,)

    def fans(self):
        return self.in_shape[0], self.spec.units

    def forward(self, x, train):
        self._cache = x if train else None
        return dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        x = self._need_cache()
        self.grads["weight"] = x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


class FlattenLayer(Layer):
    @property
    def out_shape(self):
        return (int(np.prod(self.in_shape)),)

    def forward(self, x, train):
        self._cache = x.shape if train else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


_LAYERS = {
    Conv: ConvLayer,
    BatchNorm: BatchNormLayer,
    LeakyReLU: LeakyReLULayer,
    MaxPool: MaxPoolLayer,
    Dense: DenseLayer,
    Flatten: FlattenLayer,
}


def build_layer(spec, in_shape, dtype):
    try:
        cls = _LAYERS[type(spec)]
    except KeyError:
        raise TypeError(f"unknown layer spec {spec!r}") from None
    expects_2d = isinstance(spec, Dense)
    if expects_2d != (len(in_shape) == 1) and not isinstance(spec, (BatchNorm, LeakyReLU)):
        raise ShapeMismatch(f"{type(spec).__name__} cannot follow a layer with output shape {in_shape}")
    return cls(spec, in_shape, dtype)
