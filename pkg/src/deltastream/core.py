"""Dense numerical kernels shared by every layer.

All public operations work on row-major float64 numpy arrays and keep the
accumulation in 64-bit. They are pure functions: safe to call concurrently
as long as callers do not mutate shared inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

RMS_EPS = 1e-6
DEFAULT_ROPE_BASE = 10000.0


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit conformance checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} x {b.shape})")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def silu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with per-row max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Scale each row to unit root-mean-square, then multiply by gain."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: gain length {gain.shape} vs cols {x.shape[-1]}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * gain


def rope_rows(
    x: np.ndarray, positions: np.ndarray, base: float = DEFAULT_ROPE_BASE
) -> np.ndarray:
    """Rotary embedding with one absolute position per row.

    Adjacent column pairs (2i, 2i+1) are rotated by angle
    position * base**(-2i/d). Pure rotation: pairwise norms are preserved.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope: feature dim must be even, got {d}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    if positions.shape[0] != x.shape[0]:
        raise ShapeError("rope: one position per row required")
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    theta = positions * inv_freq  # (rows, d/2)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def rope(x: np.ndarray, position: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotary embedding applying the same absolute position to every row."""
    x = as_matrix(x)
    return rope_rows(x, np.full(x.shape[0], position), base)


def causal_conv(
    x: np.ndarray, kernel: np.ndarray, tail: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Depthwise causal convolution over a sequence of vectors.

    ``x`` is (steps, channels), ``kernel`` is (width, channels) with the last
    row weighting the current token and earlier rows weighting older tokens,
    ``tail`` is the (width-1, channels) input history (zeros at stream start).
    Returns the convolved sequence and the tail to carry into the next call,
    so any split of a stream into successive calls is exact.
    """
    x = as_matrix(x)
    kernel = as_matrix(kernel)
    tail = as_matrix(tail)
    width, channels = kernel.shape
    if x.shape[1] != channels:
        raise ShapeError(f"causal_conv: {x.shape[1]} channels vs kernel {channels}")
    if tail.shape != (width - 1, channels):
        raise ShapeError(
            f"causal_conv: tail must be ({width - 1}, {channels}), got {tail.shape}"
        )
    steps = x.shape[0]
    ext = np.concatenate([tail, x], axis=0)
    y = np.zeros_like(x)
    for j in range(width):
        y += kernel[j] * ext[j : j + steps]
    return y, ext[steps:].copy()


def causal_conv_step(
    x_t: np.ndarray, kernel: np.ndarray, tail: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-token ``causal_conv``; same tap order, same results."""
    width = kernel.shape[0]
    if width == 1:
        return kernel[0] * x_t, tail.copy()
    y = kernel[0] * tail[0]
    for j in range(1, width - 1):
        y = y + kernel[j] * tail[j]
    y = y + kernel[width - 1] * x_t
    new_tail = np.empty_like(tail)
    new_tail[:-1] = tail[1:]
    new_tail[-1] = x_t
    return y, new_tail


class Rng:
    """Seeded random source with a bit-exact draw sequence per seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.default_rng(self.seed)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape).astype(np.float64)

    def integers(self, n: int, size=None):
        return self._gen.integers(0, n, size=size)

    def fork(self) -> "Rng":
        """Derive an independent child stream (clone-per-context idiom)."""
        return Rng(int(self._gen.integers(0, 2**63 - 1)))


WEIGHT_INIT_SCALE = 0.02


def init_weight(rng: Rng, shape) -> np.ndarray:
    """Default deterministic weight initialization."""
    return rng.uniform(-WEIGHT_INIT_SCALE, WEIGHT_INIT_SCALE, shape)
