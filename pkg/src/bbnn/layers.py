"""Stateful layers built on the tensor kernels.

Every layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into ``self.grads`` during ``backward``.
"""
from __future__ import annotations

import numpy as np

from .tensor import (
    DTYPE,
    ConvKernel,
    ShapeError,
    avgpool2d,
    avgpool2d_backward,
    conv2d,
    conv2d_backward,
    maxpool2d,
    maxpool2d_backward,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class Module:
    """Minimal parameter container: own params/buffers plus named children."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_gradients(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, self.grads.get(name, np.zeros_like(p))
        for cname, child in self.children():
            yield from child.named_gradients(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in canonical order."""
        return dict(list(self.named_parameters()) + list(self.named_buffers()))

    def zero_grad(self):
        self.grads = {}
        for _, child in self.children():
            child.zero_grad()


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class BatchNorm(Module):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, channels: int, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=DTYPE):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError(f"momentum must be in (0,1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype),
                        "steps": np.zeros(1, dtype)}
        self._cache = None

    def forward(self, x: np.ndarray, training=False) -> np.ndarray:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm: input {x.shape} has {x.shape[-1]} channels, expected {self.channels}")
        dt = x.dtype.type
        gamma = self.params["gamma"].astype(x.dtype, copy=False)
        beta = self.params["beta"].astype(x.dtype, copy=False)
        if training:
            m = x.size // self.channels
            if m < 2:
                raise ShapeError(f"batchnorm: training needs at least 2 values per channel, got input {x.shape}")
            mean = x.mean(axis=(0, 1, 2), dtype=x.dtype)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 1, 2), dtype=x.dtype)
            self._update_running(mean, var)
        else:
            centered = x - self.buffers["running_mean"].astype(x.dtype, copy=False)
            var = self.buffers["running_var"].astype(x.dtype, copy=False)
        inv_std = dt(1) / np.sqrt(var + dt(self.eps))
        xhat = centered * inv_std
        self._cache = (xhat, inv_std, training)
        return xhat * gamma + beta

    def _update_running(self, mean, var):
        # Exponential moving average with the zero-start bias divided out, so the
        # first few batches already give usable inference statistics.
        mom = self.momentum
        steps = self.buffers["steps"]
        prev_w = 1 - mom ** float(steps[0])
        steps += 1
        w = 1 - mom ** float(steps[0])
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = (mom * prev_w * rm + (1 - mom) * mean) / w
        rv[...] = np.maximum((mom * prev_w * rv + (1 - mom) * var) / w, np.finfo(rv.dtype).tiny)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._cache
        gamma = self.params["gamma"].astype(grad_out.dtype, copy=False)
        g_sum = grad_out.sum(axis=(0, 1, 2), dtype=grad_out.dtype)
        gx_sum = (grad_out * xhat).sum(axis=(0, 1, 2), dtype=grad_out.dtype)
        self.grads["gamma"] = gx_sum
        self.grads["beta"] = g_sum
        if not training:
            return grad_out * (gamma * inv_std)
        m = grad_out.dtype.type(xhat.size // self.channels)
        return (gamma * inv_std / m) * (m * grad_out - g_sum - xhat * gx_sum)


def batchnorm_forward(x: np.ndarray, s: BatchNorm, training=False) -> np.ndarray:
    return s.forward(x, training)


class Conv2D(Module):
    def __init__(self, kh, kw, c_in, c_out, rng=None, stride=1, dtype=DTYPE):
        super().__init__()
        self.kernel = ConvKernel.zeros(kh, kw, c_in, c_out, stride, dtype)
        if rng is not None:
            self.kernel.weights[...] = fan_in_uniform(rng, self.kernel.weights.shape, kh * kw * c_in, dtype)
        self.params = {"weight": self.kernel.weights, "bias": self.kernel.bias}
        self._x = None

    @property
    def n_params(self) -> int:
        return self.kernel.n_params

    def forward(self, x: np.ndarray, training=False) -> np.ndarray:
        self._x = x
        return conv2d(x, self.kernel)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, gw, gb = conv2d_backward(self._x, self.kernel, grad_out)
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx


class BnConvUnit(Module):
    """Pre-activation unit: BN, then ReLU, then convolution."""

    def __init__(self, k: int, c_in: int, c_out: int, rng=None, dtype=DTYPE):
        super().__init__()
        self.bn = BatchNorm(c_in, dtype=dtype)
        self.conv = Conv2D(k, k, c_in, c_out, rng, dtype=dtype)
        self._pre = None

    def children(self):
        return [("bn", self.bn), ("conv", self.conv)]

    @property
    def c_in(self):
        return self.conv.kernel.c_in

    @property
    def c_out(self):
        return self.conv.kernel.c_out

    def forward(self, x, training=False):
        self._pre = self.bn.forward(x, training)
        return self.conv.forward(relu(self._pre), training)

    def backward(self, grad_out):
        g = self.conv.backward(grad_out)
        return self.bn.backward(relu_backward(self._pre, g))


class MaxPool2D(Module):
    def __init__(self, window, stride, padding="valid"):
        super().__init__()
        self.window, self.stride, self.padding = window, stride, padding
        self._x = self._out = None

    def forward(self, x, training=False):
        self._x = x
        self._out = maxpool2d(x, self.window, self.stride, self.padding)
        return self._out

    def backward(self, grad_out):
        return maxpool2d_backward(self._x, self.window, self.stride, grad_out, self._out, self.padding)


class AvgPool2D(Module):
    def __init__(self, window, stride):
        super().__init__()
        self.window, self.stride = window, stride
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return avgpool2d(x, self.window, self.stride)

    def backward(self, grad_out):
        return avgpool2d_backward(self._x, self.window, self.stride, grad_out)


class DenseHead(Module):
    """Affine map from pooled features (N,1,1,C) to class logits (N, n_classes)."""

    def __init__(self, c_in: int, n_classes: int, rng=None, dtype=DTYPE):
        super().__init__()
        w = np.zeros((c_in, n_classes), dtype)
        if rng is not None:
            w[...] = fan_in_uniform(rng, w.shape, c_in, dtype)
        self.params = {"weight": w, "bias": np.zeros(n_classes, dtype)}
        self._x = None

    @property
    def n_params(self) -> int:
        return self.params["weight"].size + self.params["bias"].size

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1:3] != (1, 1):
            raise ShapeError(f"dense head expects (N,1,1,C) input, got {x.shape}")
        if x.shape[3] != self.params["weight"].shape[0]:
            raise ShapeError(f"dense head: {x.shape[3]} input channels, expected {self.params['weight'].shape[0]}")
        self._x = x.reshape(x.shape[0], -1)
        w = self.params["weight"].astype(x.dtype, copy=False)
        return self._x @ w + self.params["bias"].astype(x.dtype, copy=False)

    def backward(self, grad_logits):
        w = self.params["weight"].astype(grad_logits.dtype, copy=False)
        self.grads["weight"] = self._x.T @ grad_logits
        self.grads["bias"] = grad_logits.sum(axis=0)
        return (grad_logits @ w.T).reshape(grad_logits.shape[0], 1, 1, -1)


def dense_softmax_forward(x: np.ndarray, h: DenseHead) -> np.ndarray:
    return softmax(h.forward(x))
