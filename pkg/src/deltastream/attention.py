"""Softmax attention: full-causal, sliding-window, and grouped-query variants.

The sliding-window path keeps a fixed-capacity ring buffer of the most
recent key/value rows per kv-head, so per-step cost and cache bytes are
constant once the window is full. Keys are stored post-rotary, at their
absolute stream position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_ROPE_BASE, softmax_rows
from .errors import ConfigError, ShapeError

FLOAT_BYTES = 8


@dataclass(frozen=True)
class AttnConfig:
    """Head geometry and window for one attention layer."""

    n_query_heads: int
    n_kv_heads: int
    head_dim: int
    window: int
    rope_base: float = DEFAULT_ROPE_BASE

    def __post_init__(self):
        if self.n_query_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_query_heads={self.n_query_heads} not divisible by "
                f"n_kv_heads={self.n_kv_heads}"
            )
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects (heads, len, dim) tensors")
    if k.shape != v.shape:
        raise ShapeError(f"k/v shape mismatch: {k.shape} vs {v.shape}")
    if q.shape[1:] != k.shape[1:]:
        raise ShapeError(f"q {q.shape} incompatible with k {k.shape}")
    if q.shape[0] % k.shape[0] != 0:
        raise ShapeError(
            f"{q.shape[0]} query heads not divisible by {k.shape[0]} kv heads"
        )


def full_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = True
) -> np.ndarray:
    """Scaled dot-product attention, Softmax(QK^T / sqrt(d)) V, per head.

    ``q`` is (n_query_heads, L, d); ``k``/``v`` are (n_kv_heads, L, d) and
    query head h reads kv head h // (n_query_heads // n_kv_heads).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_qkv(q, k, v)
    n_q, seq_len, d = q.shape
    group = n_q // k.shape[0]
    scale = 1.0 / np.sqrt(d)
    out = np.empty_like(q)
    mask = None
    if causal:
        idx = np.arange(seq_len)
        mask = idx[None, :] > idx[:, None]
    for h in range(n_q):
        kv = h // group
        logits = (q[h] @ k[kv].T) * scale
        if mask is not None:
            logits = np.where(mask, -np.inf, logits)
        out[h] = softmax_rows(logits) @ v[kv]
    return out


def windowed_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, window: int
) -> np.ndarray:
    """Causal attention restricted to the most recent ``window`` tokens.

    Position i attends to j in [max(0, i-window+1), i]; with window >= L this
    is exactly causal full_attention.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_qkv(q, k, v)
    n_q, seq_len, d = q.shape
    group = n_q // k.shape[0]
    scale = 1.0 / np.sqrt(d)
    idx = np.arange(seq_len)
    masked = (idx[None, :] > idx[:, None]) | (idx[:, None] - idx[None, :] >= window)
    out = np.empty_like(q)
    for h in range(n_q):
        kv = h // group
        logits = (q[h] @ k[kv].T) * scale
        logits = np.where(masked, -np.inf, logits)
        out[h] = softmax_rows(logits) @ v[kv]
    return out


@dataclass
class SwaCache:
    """Ring buffer of the last ``window`` post-rotary K/V rows per kv-head.

    A mutable session object: one step at a time, movable between contexts
    between steps. Rows are evicted strictly oldest-first; byte usage is
    constant once ``abs_pos >= window``.
    """

    config: AttnConfig
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    abs_pos: int = field(default=0, init=False)

    def __post_init__(self):
        shape = (self.config.n_kv_heads, self.config.window, self.config.head_dim)
        self.keys = np.zeros(shape, dtype=np.float64)
        self.values = np.zeros(shape, dtype=np.float64)

    @property
    def stored(self) -> int:
        return min(self.abs_pos, self.config.window)

    def cached_positions(self) -> np.ndarray:
        """Absolute positions currently held (a contiguous suffix)."""
        return np.arange(self.abs_pos - self.stored, self.abs_pos)

    def gather(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Return the ``count`` most recent cached (keys, values) in order."""
        pos = np.arange(self.abs_pos - count, self.abs_pos) % self.config.window
        return self.keys[:, pos, :], self.values[:, pos, :]

    def push(self, k_t: np.ndarray, v_t: np.ndarray) -> None:
        slot = self.abs_pos % self.config.window
        self.keys[:, slot, :] = k_t
        self.values[:, slot, :] = v_t
        self.abs_pos += 1


def swa_step(
    q_t: np.ndarray, k_t: np.ndarray, v_t: np.ndarray, cache: SwaCache
) -> tuple[np.ndarray, SwaCache]:
    """One sliding-window decode step.

    ``q_t`` is (n_query_heads, d); ``k_t``/``v_t`` are (n_kv_heads, d), all
    already rotated at absolute position ``cache.abs_pos``. Attends over the
    incoming token plus the most recent ``window - 1`` cached tokens, then
    writes (k_t, v_t) into the ring.
    """
    cfg = cache.config
    q_t = np.asarray(q_t, dtype=np.float64)
    k_t = np.asarray(k_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if q_t.shape != (cfg.n_query_heads, cfg.head_dim):
        raise ShapeError(f"swa_step: q_t shape {q_t.shape}")
    if k_t.shape != (cfg.n_kv_heads, cfg.head_dim) or v_t.shape != k_t.shape:
        raise ShapeError(f"swa_step: k_t/v_t shape {k_t.shape}/{v_t.shape}")
    n_ctx = min(cache.abs_pos, cfg.window - 1)
    k_ctx, v_ctx = cache.gather(n_ctx)
    k_all = np.concatenate([k_ctx, k_t[:, None, :]], axis=1)
    v_all = np.concatenate([v_ctx, v_t[:, None, :]], axis=1)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    group = cfg.group_size
    out = np.empty_like(q_t)
    for h in range(cfg.n_query_heads):
        kv = h // group
        logits = (k_all[kv] @ q_t[h]) * scale
        w = softmax_rows(logits[None, :])[0]
        out[h] = w @ v_all[kv]
    cache.push(k_t, v_t)
    return out, cache


def swa_state_bytes(cache: SwaCache) -> int:
    """Exact payload bytes of the stored K/V rows (not ring capacity)."""
    cfg = cache.config
    return 2 * cache.stored * cfg.n_kv_heads * cfg.head_dim * FLOAT_BYTES


@dataclass
class FullCache:
    """Unbounded K/V cache for the full-attention baseline.

    Append-only; backed by capacity-doubling arrays so per-step work stays
    proportional to the attention span, not to reallocation.
    """

    config: AttnConfig
    abs_pos: int = field(default=0, init=False)

    def __post_init__(self):
        cap = 16
        self._keys = np.zeros(
            (self.config.n_kv_heads, cap, self.config.head_dim), dtype=np.float64
        )
        self._values = np.zeros_like(self._keys)

    def _grow(self):
        cap = self._keys.shape[1]
        new = np.zeros(
            (self.config.n_kv_heads, cap * 2, self.config.head_dim), dtype=np.float64
        )
        new[:, :cap, :] = self._keys
        self._keys = new
        new_v = np.zeros_like(new)
        new_v[:, :cap, :] = self._values
        self._values = new_v

    def push(self, k_t: np.ndarray, v_t: np.ndarray) -> None:
        if self.abs_pos == self._keys.shape[1]:
            self._grow()
        self._keys[:, self.abs_pos, :] = k_t
        self._values[:, self.abs_pos, :] = v_t
        self.abs_pos += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self._keys[:, : self.abs_pos, :], self._values[:, : self.abs_pos, :]


def full_step(
    q_t: np.ndarray, k_t: np.ndarray, v_t: np.ndarray, cache: FullCache
) -> tuple[np.ndarray, FullCache]:
    """One decode step against an ever-growing cache (baseline path)."""
    cfg = cache.config
    cache.push(k_t, v_t)
    k_all, v_all = cache.view()
    scale = 1.0 / np.sqrt(cfg.head_dim)
    group = cfg.group_size
    out = np.empty((cfg.n_query_heads, cfg.head_dim), dtype=np.float64)
    for h in range(cfg.n_query_heads):
        kv = h // group
        logits = (k_all[kv] @ np.asarray(q_t, dtype=np.float64)[h]) * scale
        w = softmax_rows(logits[None, :])[0]
        out[h] = w @ v_all[kv]
    return out, cache


def full_state_bytes(cache: FullCache) -> int:
    """Payload bytes of all stored K/V rows (grows with every step)."""
    cfg = cache.config
    return 2 * cache.abs_pos * cfg.n_kv_heads * cfg.head_dim * FLOAT_BYTES
