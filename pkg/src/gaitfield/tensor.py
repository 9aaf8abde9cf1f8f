"""Dense tensor substrate.

Tensors are plain ``float64`` numpy arrays laid out ``(n, h, w, c)``.
Convolutions are stride 1 with zero "same" padding. Every op with
parameters has a ``*_forward`` returning ``(out, cache)`` and a matching
``*_backward``; there is no graph engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, NumericError

DEFAULT_SLOPE = 0.2


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ConfigError(f"{name}: expected 4-d (n, h, w, c) array, got shape {x.shape}")
    return x


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: non-finite values")
    return x


@dataclass
class ConvLayer:
    """Square-kernel convolution followed by an activation.

    ``weights`` has shape ``(c_out, c_in, k, k)``. ``slope`` is the leaky
    slope of the activation, or ``None`` for identity.
    """

    weights: np.ndarray
    bias: np.ndarray
    slope: float | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ConfigError(f"conv weights must be (c_out, c_in, k, k), got {self.weights.shape}")
        if self.weights.shape[2] % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {self.weights.shape[2]}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigError(f"bias shape {self.bias.shape} does not match c_out={self.weights.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
              slope: float | None = DEFAULT_SLOPE) -> ConvLayer:
    """He-style uniform init in +-sqrt(6 / (c_in k^2)); bias zero.

    The wider bound keeps activations from shrinking through deep stacks,
    which otherwise leaves the softmax over neighbours nearly flat.
    """
    bound = np.sqrt(6.0 / (c_in * k * k))
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    return ConvLayer(w, np.zeros(c_out), slope)


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # (n, h, w, k, k, c) view; the trailing (kj, c) run is contiguous in memory,
    # which makes the im2col copy far cheaper than a (c, k, k) ordering
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, w, c = x.shape
    s = xp.strides
    return as_strided(xp, (n, h, w, k, k, c), (s[0], s[1], s[2], s[1], s[2], s[3]),
                      writeable=False)


def _flat_kernel(weights: np.ndarray) -> np.ndarray:
    c_out = weights.shape[0]
    return weights.transpose(2, 3, 1, 0).reshape(-1, c_out)


_CONV_ROWS = 4096


def _row_chunks(n: int, h: int, w: int):
    step = max(1, _CONV_ROWS // (h * w))
    for i in range(0, n, step):
        yield slice(i, min(i + step, n))


def _linear_conv(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # chunk over frames so the im2col buffer stays cache-sized
    n, h, w, _ = x.shape
    c_out, _, k, _ = weights.shape
    win = _windows(x, k)
    wm = _flat_kernel(weights)
    out = np.empty((n, h, w, c_out))
    for sl in _row_chunks(n, h, w):
        m = (sl.stop - sl.start) * h * w
        np.matmul(win[sl].reshape(m, -1), wm, out=out[sl].reshape(m, c_out))
    return out


def _kernel_grad(x: np.ndarray, dz: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c_in = x.shape
    c_out = dz.shape[-1]
    win = _windows(x, k)
    acc = np.zeros((c_out, k * k * c_in))
    for sl in _row_chunks(n, h, w):
        m = (sl.stop - sl.start) * h * w
        acc += dz[sl].reshape(m, c_out).T @ win[sl].reshape(m, -1)
    return acc.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)


def leaky(z: np.ndarray, slope: float | None) -> np.ndarray:
    if slope is None:
        return z
    if 0 <= slope <= 1:
        return np.maximum(z, slope * z)
    return np.where(z > 0, z, slope * z)


def conv2d_forward(x: np.ndarray, layer: ConvLayer):
    x = as_tensor4(x, "conv input")
    if x.shape[3] != layer.c_in:
        raise ConfigError(f"conv input has {x.shape[3]} channels, layer expects {layer.c_in}")
    z = _linear_conv(x, layer.weights) + layer.bias
    return leaky(z, layer.slope), (x, z, layer)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    return conv2d_forward(x, layer)[0]


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Returns ``(dx, dweights, dbias)``; ``dx`` is None when not needed."""
    x, z, layer = cache
    dz = dout if layer.slope is None else dout * np.where(z > 0, 1.0, layer.slope)
    dw = _kernel_grad(x, dz, layer.k)
    db = dz.reshape(-1, layer.c_out).sum(axis=0)
    if not need_dx:
        return None, dw, db
    # transpose conv == same-padded conv with flipped, channel-swapped kernel
    w_t = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = _linear_conv(dz, np.ascontiguousarray(w_t))
    return dx, dw, db


def stack_forward(x: np.ndarray, layers: list[ConvLayer]):
    caches = []
    for layer in layers:
        x, c = conv2d_forward(x, layer)
        caches.append(c)
    return x, caches


def stack_backward(dout: np.ndarray, caches, need_dx: bool = True):
    """Backward through a conv stack. Returns ``(dx, [(dw, db), ...])``."""
    grads = []
    for i in range(len(caches) - 1, -1, -1):
        dout, dw, db = conv2d_backward(dout, caches[i], need_dx or i > 0)
        grads.append((dw, db))
    return dout, grads[::-1]


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ConfigError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def finite_difference_grad(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + eps
        hi = float(loss_fn(p.copy()))
        p[i] = orig - eps
        lo = float(loss_fn(p.copy()))
        p[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while differencing coordinate {i}")
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
