"""Primitive NHWC kernels with analytic backward passes.

Tensors are plain numpy arrays of shape (batch, time, frequency, channels).
Kernels keep the dtype of their inputs: float32 in normal use, float64 when
a gradient check wants clean finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 (N,H,W,C) tensor, got shape {x.shape}")
    return x


def _check4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (N,H,W,C), got shape {x.shape}")
    if 0 in x.shape:
        raise ShapeError(f"{what}: zero-sized input {x.shape}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def same_padding(size: int, k: int, s: int) -> tuple[int, int]:
    """(before, after) zero padding for SAME; the odd extra goes after."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


@dataclass
class ConvKernel:
    weights: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be (kh,kw,c_in,c_out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.weights.shape[3]}")
        self.stride = _pair(self.stride)
        if min(self.stride) < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        kh, kw = self.weights.shape[:2]
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError(f"SAME padding needs odd kernel dims, got {kh}x{kw}")

    @classmethod
    def zeros(cls, kh, kw, c_in, c_out, stride=1, dtype=DTYPE):
        return cls(np.zeros((kh, kw, c_in, c_out), dtype), np.zeros(c_out, dtype), _pair(stride))

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[3]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def _pads(self, h: int, w: int):
        kh, kw = self.weights.shape[:2]
        sh, sw = self.stride
        if self.padding == "same":
            return same_padding(h, kh, sh), same_padding(w, kw, sw)
        return (0, 0), (0, 0)


def conv2d(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Cross-correlation with zero SAME padding, plus bias."""
    _check4(x, "conv2d")
    if x.shape[3] != k.c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.weights.shape}")
    n, h, w, _ = x.shape
    kh, kw = k.weights.shape[:2]
    sh, sw = k.stride
    (pt, pb), (pl, pr) = k._pads(h, w)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {x.shape}")
    w_ = k.weights.astype(x.dtype, copy=False)
    out = np.zeros((n, ho, wo, k.c_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
            out += tap @ w_[i, j]
    out += k.bias.astype(x.dtype, copy=False)
    return out


def conv2d_backward(x: np.ndarray, k: ConvKernel, grad_out: np.ndarray):
    """Gradients of sum(grad_out * conv2d(x, k)) w.r.t. x, weights and bias."""
    _check4(x, "conv2d_backward")
    n, h, w, _ = x.shape
    kh, kw = k.weights.shape[:2]
    sh, sw = k.stride
    (pt, pb), (pl, pr) = k._pads(h, w)
    hp, wp = h + pt + pb, w + pl + pr
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    if grad_out.shape != (n, ho, wo, k.c_out):
        raise ShapeError(f"conv2d_backward: grad_out {grad_out.shape} != output shape {(n, ho, wo, k.c_out)}")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    dt = x.dtype
    w_ = k.weights.astype(dt, copy=False)
    g2 = grad_out.reshape(-1, k.c_out)
    grad_w = np.empty(k.weights.shape, dtype=dt)
    grad_xp = np.zeros(xp.shape, dtype=dt)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
            grad_w[i, j] = xp[sl].reshape(-1, k.c_in).T @ g2
            grad_xp[sl] += grad_out @ w_[i, j].T
    grad_b = grad_out.sum(axis=(0, 1, 2), dtype=dt)
    grad_x = grad_xp[:, pt:pt + h, pl:pl + w, :]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def _pool_geometry(x, window, stride, padding, what):
    _check4(x, what)
    (ph, pw), (sh, sw) = _pair(window), _pair(stride)
    if min(sh, sw) < 1:
        raise ValueError(f"{what}: stride must be positive, got {(sh, sw)}")
    _, h, w, _ = x.shape
    if padding == "same":
        pads = same_padding(h, ph, sh), same_padding(w, pw, sw)
    elif padding == "valid":
        pads = (0, 0), (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + sum(pads[0]), w + sum(pads[1])
    if ph > hp or pw > wp:
        raise ShapeError(f"{what}: window {(ph, pw)} larger than input {x.shape}")
    ho, wo = (hp - ph) // sh + 1, (wp - pw) // sw + 1
    return (ph, pw), (sh, sw), pads, (ho, wo)


def _taps(ph, pw, sh, sw, ho, wo):
    for i in range(ph):
        for j in range(pw):
            yield i * pw + j, (slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))


def maxpool2d(x, window, stride, padding="valid"):
    """Window max over each (ph, pw) patch."""
    (ph, pw), (sh, sw), pads, (ho, wo) = _pool_geometry(x, window, stride, padding, "maxpool2d")
    xp = np.pad(x, ((0, 0), *pads, (0, 0)), constant_values=-np.inf) if padding == "same" else x
    out = None
    for _, sl in _taps(ph, pw, sh, sw, ho, wo):
        out = xp[sl].copy() if out is None else np.maximum(out, xp[sl], out=out)
    return out


def maxpool2d_backward(x, window, stride, grad_out, out=None, padding="valid"):
    """Route each output gradient to the first (row-major) maximal cell of its window."""
    (ph, pw), (sh, sw), pads, (ho, wo) = _pool_geometry(x, window, stride, padding, "maxpool2d_backward")
    if grad_out.shape != (x.shape[0], ho, wo, x.shape[3]):
        raise ShapeError(f"maxpool2d_backward: grad_out {grad_out.shape} does not match pooled shape")
    if out is None:
        out = maxpool2d(x, window, stride, padding)
    xp = np.pad(x, ((0, 0), *pads, (0, 0)), constant_values=-np.inf) if padding == "same" else x
    grad = np.zeros(xp.shape, dtype=grad_out.dtype)
    pending = np.ones(out.shape, dtype=bool)
    for _, sl in _taps(ph, pw, sh, sw, ho, wo):
        hit = xp[sl] == out
        hit &= pending
        pending &= ~hit
        grad[sl] += grad_out * hit
    (pt, _), (pl, _) = pads
    return np.ascontiguousarray(grad[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :])


def avgpool2d(x, window, stride):
    (ph, pw), (sh, sw), _, (ho, wo) = _pool_geometry(x, window, stride, "valid", "avgpool2d")
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=x.dtype)
    for _, sl in _taps(ph, pw, sh, sw, ho, wo):
        out += x[sl]
    out /= x.dtype.type(ph * pw)
    return out


def avgpool2d_backward(x, window, stride, grad_out):
    (ph, pw), (sh, sw), _, (ho, wo) = _pool_geometry(x, window, stride, "valid", "avgpool2d_backward")
    if grad_out.shape != (x.shape[0], ho, wo, x.shape[3]):
        raise ShapeError(f"avgpool2d_backward: grad_out {grad_out.shape} does not match pooled shape")
    grad = np.zeros(x.shape, dtype=grad_out.dtype)
    share = grad_out / grad_out.dtype.type(ph * pw)
    for _, sl in _taps(ph, pw, sh, sw, ho, wo):
        grad[sl] += share
    return grad


def concat_channels(xs) -> np.ndarray:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    ref = xs[0].shape[:3]
    for i, x in enumerate(xs):
        if x.ndim != 4 or x.shape[:3] != ref:
            raise ShapeError(f"concat_channels: input {i} has shape {x.shape}, expected (N,H,W)={ref}")
    return np.concatenate(xs, axis=3)


def split_channels(x: np.ndarray, widths) -> list[np.ndarray]:
    """Inverse of concat_channels for the given channel widths."""
    if sum(widths) != x.shape[3]:
        raise ShapeError(f"split_channels: widths {list(widths)} do not sum to {x.shape[3]}")
    return np.split(x, np.cumsum(widths)[:-1], axis=3)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check4(x, "global_avg_pool")
    return x.mean(axis=(1, 2), keepdims=True, dtype=x.dtype)


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    n, h, w, c = x_shape
    return np.broadcast_to(grad_out / grad_out.dtype.type(h * w), (n, h, w, c)).copy()
