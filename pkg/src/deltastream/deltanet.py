"""Gated delta-rule linear attention with a constant-size matrix memory.

Per head the memory is a (d_v, d_k) matrix S updated once per token:

    S_t = alpha_t * S_{t-1} (I - beta_t k_t k_t^T) + beta_t v_t k_t^T
    o_t = S_t q_t

with alpha_t in (0, 1] (retention gate), beta_t in [0, 1] (write strength)
and k_t unit-norm. The reflector I - beta k k^T shrinks the stored content
only along the incoming key direction, so for unit keys the update never
expands the orthogonal complement and the Frobenius norm obeys
||S_t|| <= alpha_t ||S_{t-1}|| + beta_t ||v_t||.

Three equivalent evaluation routes are provided: token-by-token steps,
a chunkwise block-parallel form (identical outputs and final state), and
a hand-derived reverse-mode backward for the whole recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Rng, causal_conv, causal_conv_step, init_weight, sigmoid, silu, softplus
from .errors import ConfigError, ShapeError

FLOAT_BYTES = 8


@dataclass(frozen=True)
class GdnConfig:
    """Geometry of one gated delta-rule layer."""

    n_heads: int
    d_k: int
    d_v: int
    conv_width: int = 4
    chunk: int = 64

    def __post_init__(self):
        if min(self.n_heads, self.d_k, self.d_v) < 1:
            raise ConfigError("gdn dims must be positive")
        if self.conv_width != 4:
            raise ConfigError(f"conv_width must be 4, got {self.conv_width}")
        if self.chunk < 1:
            raise ConfigError(f"chunk must be >= 1, got {self.chunk}")


# ---------------------------------------------------------------------------
# Recurrence kernels (plain arrays; no projections, no convolution)
# ---------------------------------------------------------------------------


def linear_attn_step(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, s_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Ungated linear-attention step: accumulate outer(v, k), read with q.

    ``q``/``k`` are (heads, d_k), ``v`` is (heads, d_v), ``s_prev`` is
    (heads, d_v, d_k). Returns (o, s_next) with o read from the updated state.
    """
    q, k, v, s_prev = _check_step_args(q, k, v, s_prev)
    s_next = s_prev + v[:, :, None] * k[:, None, :]
    o = np.einsum("hvk,hk->hv", s_next, q)
    return o, s_next


def gdn_step(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    s_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One gated delta-rule update; see the module docstring for the formula.

    ``alpha``/``beta`` are per-head scalars, shape (heads,). Keys should be
    unit-norm for the Householder reading, but the formula is evaluated as
    stated for any inputs.
    """
    q, k, v, s_prev = _check_step_args(q, k, v, s_prev)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sk = (s_prev @ k[:, :, None])[:, :, 0]
    a = alpha[:, None, None]
    b = beta[:, None, None]
    s_next = a * (s_prev - b * (sk[:, :, None] * k[:, None, :]))
    s_next += b * (v[:, :, None] * k[:, None, :])
    o = (s_next @ q[:, :, None])[:, :, 0]
    return o, s_next


def _check_step_args(q, k, v, s_prev):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s_prev = np.asarray(s_prev, dtype=np.float64)
    n_heads, d_k = q.shape
    if k.shape != (n_heads, d_k):
        raise ShapeError(f"k shape {k.shape} vs q {q.shape}")
    if v.shape[0] != n_heads:
        raise ShapeError(f"v heads {v.shape[0]} vs q heads {n_heads}")
    if s_prev.shape != (n_heads, v.shape[1], d_k):
        raise ShapeError(f"state shape {s_prev.shape}")
    return q, k, v, s_prev


def gdn_step_loop(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    s0: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Reference token-by-token evaluation over a whole sequence.

    Sequence tensors are (heads, L, dim); gates are (heads, L).
    """
    n_heads, length, _ = q.shape
    d_v = v.shape[2]
    s = np.array(s0, dtype=np.float64)
    out = np.empty((n_heads, length, d_v), dtype=np.float64)
    for t in range(length):
        o_t, s = gdn_step(q[:, t], k[:, t], v[:, t], alpha[:, t], beta[:, t], s)
        out[:, t] = o_t
    return out, s


def gdn_chunked(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    s0: np.ndarray,
    chunk: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Block-parallel evaluation of the gated delta rule.

    Mathematically identical to ``gdn_step_loop``: within each block the
    per-token pseudo-values are obtained from a unit-lower-triangular solve
    (alpha handled in log space; valid for alpha in (0, 1]), the block's
    outputs come from one masked matrix product, and the state is carried
    across blocks. ``chunk == 1`` takes the step-loop path unchanged.
    """
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")
    if chunk == 1:
        return gdn_step_loop(q, k, v, alpha, beta, s0)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    n_heads, length, d_v = v.shape
    s = np.array(s0, dtype=np.float64)
    out = np.empty((n_heads, length, d_v), dtype=np.float64)
    for start in range(0, length, chunk):
        end = min(start + chunk, length)
        sl = slice(start, end)
        out[:, sl], s = _gdn_block(
            q[:, sl], k[:, sl], v[:, sl], alpha[:, sl], beta[:, sl], s
        )
    return out, s


def _gdn_block(q, k, v, alpha, beta, s0):
    """Process one block given the incoming state (heads, d_v, d_k)."""
    n_heads, c, _ = q.shape
    b = np.cumsum(np.log(alpha), axis=1)  # (H, C) cumulative log-decay
    decay = b[:, :, None] - b[:, None, :]  # exp(decay[i,j]) = prod alpha_{j+1..i}
    lower = np.tril(np.ones((c, c), dtype=bool), k=-1)
    incl = np.tril(np.ones((c, c), dtype=bool), k=0)

    kk = np.einsum("hid,hjd->hij", k, k)
    a_mat = np.where(lower, beta[:, :, None] * np.exp(decay) * kk, 0.0)
    a_mat += np.eye(c)

    rhs_k = beta[:, :, None] * np.exp(b)[:, :, None] * k
    rhs_v = beta[:, :, None] * v
    solved = np.linalg.solve(a_mat, np.concatenate([rhs_k, rhs_v], axis=2))
    w = solved[:, :, : k.shape[2]]
    u = solved[:, :, k.shape[2] :]
    v_new = u - np.einsum("hck,hvk->hcv", w, s0)

    qk = np.where(incl, np.exp(decay) * np.einsum("hid,hjd->hij", q, k), 0.0)
    o = np.exp(b)[:, :, None] * np.einsum("hcd,hvd->hcv", q, s0)
    o += np.einsum("hij,hjv->hiv", qk, v_new)

    carry = np.exp(b[:, -1:] - b)[:, :, None] * k
    s_new = np.exp(b[:, -1])[:, None, None] * s0
    s_new += np.einsum("hcv,hck->hvk", v_new, carry)
    return o, s_new


def reflector_apply(s: np.ndarray, k: np.ndarray, beta: float) -> np.ndarray:
    """Right-multiply a (d_v, d_k) state by I - beta k k^T."""
    return s - beta * np.outer(s @ k, k)


# ---------------------------------------------------------------------------
# Backward pass (reverse-mode through the recurrence)
# ---------------------------------------------------------------------------


@dataclass
class GdnGrads:
    """Gradients of the recurrence w.r.t. every input."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    s0: np.ndarray


def gdn_backward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    s0: np.ndarray,
    d_out: np.ndarray,
    d_s_final: np.ndarray | None = None,
    chunk: int = 64,
) -> GdnGrads:
    """Exact reverse-mode gradients of the gated delta-rule recurrence.

    Inputs mirror ``gdn_step_loop``; ``d_out`` is the upstream gradient of
    the output sequence, (heads, L, d_v). Instead of retaining all L states,
    the forward keeps one checkpoint per ``chunk`` tokens and the backward
    recomputes within-block states from the checkpoint.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    n_heads, length, d_k = q.shape

    checkpoints = []
    s = np.array(s0, dtype=np.float64)
    for t in range(length):
        if t % chunk == 0:
            checkpoints.append(s.copy())
        _, s = gdn_step(q[:, t], k[:, t], v[:, t], alpha[:, t], beta[:, t], s)

    grads = GdnGrads(
        q=np.zeros_like(q),
        k=np.zeros_like(k),
        v=np.zeros_like(v),
        alpha=np.zeros_like(alpha),
        beta=np.zeros_like(beta),
        s0=np.zeros_like(np.asarray(s0, dtype=np.float64)),
    )
    g = (
        np.zeros_like(grads.s0)
        if d_s_final is None
        else np.array(d_s_final, dtype=np.float64)
    )

    starts = list(range(0, length, chunk))
    for c_idx in reversed(range(len(starts))):
        start = starts[c_idx]
        end = min(start + chunk, length)
        states = [checkpoints[c_idx]]
        for t in range(start, end):
            _, s_t = gdn_step(
                q[:, t], k[:, t], v[:, t], alpha[:, t], beta[:, t], states[-1]
            )
            states.append(s_t)
        for t in reversed(range(start, end)):
            s_prev = states[t - start]
            s_t = states[t - start + 1]
            k_t, v_t, q_t = k[:, t], v[:, t], q[:, t]
            a_t = alpha[:, t][:, None]
            b_t = beta[:, t][:, None]

            # o_t = S_t q_t
            grads.q[:, t] = np.einsum("hvk,hv->hk", s_t, d_out[:, t])
            g = g + d_out[:, t][:, :, None] * q_t[:, None, :]

            # S_t = a (S_prev - b outer(S_prev k, k)) + b outer(v, k)
            sk = np.einsum("hvk,hk->hv", s_prev, k_t)
            gk = np.einsum("hvk,hk->hv", g, k_t)
            gs_inner = np.einsum("hvk,hvk->h", g, s_prev)
            gk_sk = np.einsum("hv,hv->h", gk, sk)
            grads.alpha[:, t] = gs_inner - beta[:, t] * gk_sk
            grads.beta[:, t] = -alpha[:, t] * gk_sk + np.einsum("hv,hv->h", gk, v_t)
            grads.v[:, t] = b_t * gk
            grads.k[:, t] = (
                -a_t * b_t * (np.einsum("hvk,hv->hk", s_prev, gk)
                              + np.einsum("hvk,hv->hk", g, sk))
                + b_t * np.einsum("hvk,hv->hk", g, v_t)
            )
            g = a_t[:, :, None] * (g - b_t[:, :, None] * gk[:, :, None] * k_t[:, None, :])
    grads.s0 = g
    return grads


# ---------------------------------------------------------------------------
# Full cell: projections, short conv, gates, output gate
# ---------------------------------------------------------------------------


@dataclass
class DeltaState:
    """Per-layer streaming state: memory matrix plus conv history.

    ``s`` is (heads, d_v, d_k) and never changes shape; the three tails hold
    the last conv_width-1 pre-convolution q/k/v projections. Total byte size
    is independent of how many tokens have been consumed.
    """

    s: np.ndarray
    conv_q_tail: np.ndarray
    conv_k_tail: np.ndarray
    conv_v_tail: np.ndarray

    @classmethod
    def zeros(cls, cfg: GdnConfig) -> "DeltaState":
        qk_ch = cfg.n_heads * cfg.d_k
        v_ch = cfg.n_heads * cfg.d_v
        tail = cfg.conv_width - 1
        return cls(
            s=np.zeros((cfg.n_heads, cfg.d_v, cfg.d_k), dtype=np.float64),
            conv_q_tail=np.zeros((tail, qk_ch), dtype=np.float64),
            conv_k_tail=np.zeros((tail, qk_ch), dtype=np.float64),
            conv_v_tail=np.zeros((tail, v_ch), dtype=np.float64),
        )

    def state_bytes(self) -> int:
        tails = (
            self.conv_q_tail.size + self.conv_k_tail.size + self.conv_v_tail.size
        )
        return (self.s.size + tails) * FLOAT_BYTES

    def norm(self) -> float:
        """Frobenius norm of the full memory tensor."""
        return float(np.sqrt(np.sum(self.s * self.s)))

    def head_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.s * self.s, axis=(1, 2)))


@dataclass
class GdnCellParams:
    """Weights of one gated delta-rule layer. No biases anywhere.

    ``beta_override`` is an ablation switch: when set, every write gate is
    forced to that constant (0.0 disables all memory updates).
    """

    cfg: GdnConfig
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    conv_q: np.ndarray
    conv_k: np.ndarray
    conv_v: np.ndarray
    w_alpha: np.ndarray
    w_beta: np.ndarray
    w_gate: np.ndarray
    w_out: np.ndarray
    beta_override: float | None = None


def init_gdn_cell(cfg: GdnConfig, hidden: int, rng: Rng) -> GdnCellParams:
    qk_ch = cfg.n_heads * cfg.d_k
    v_ch = cfg.n_heads * cfg.d_v
    return GdnCellParams(
        cfg=cfg,
        w_q=init_weight(rng, (hidden, qk_ch)),
        w_k=init_weight(rng, (hidden, qk_ch)),
        w_v=init_weight(rng, (hidden, v_ch)),
        conv_q=init_weight(rng, (cfg.conv_width, qk_ch)),
        conv_k=init_weight(rng, (cfg.conv_width, qk_ch)),
        conv_v=init_weight(rng, (cfg.conv_width, v_ch)),
        w_alpha=init_weight(rng, (hidden, cfg.n_heads)),
        w_beta=init_weight(rng, (hidden, cfg.n_heads)),
        w_gate=init_weight(rng, (hidden, v_ch)),
        w_out=init_weight(rng, (v_ch, hidden)),
    )


# Fixed retention timescale: the per-token decay exponent is kept small so a
# randomly initialized cell forgets over ~1/RETENTION_SCALE tokens rather than
# ~2, which is what lets long-stream memory norms settle on a plateau.
RETENTION_SCALE = 0.01


def gdn_gates(x: np.ndarray, params: GdnCellParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-head (alpha, beta) for input rows x: (..., hidden).

    alpha = exp(-RETENTION_SCALE * softplus(x w_a)) in (0, 1);
    beta = sigmoid(x w_b) in (0, 1).
    """
    alpha = np.exp(-RETENTION_SCALE * softplus(x @ params.w_alpha))
    if params.beta_override is not None:
        beta = np.full(alpha.shape, float(params.beta_override))
    else:
        beta = sigmoid(x @ params.w_beta)
    return alpha, beta


def _normalize_keys(k: np.ndarray) -> np.ndarray:
    """Unit-normalize along the last axis (zero vectors stay zero)."""
    norm = np.sqrt(np.sum(k * k, axis=-1, keepdims=True))
    return k / np.maximum(norm, 1e-12)


def gdn_cell_forward(
    x_t: np.ndarray,
    params: GdnCellParams,
    state: DeltaState,
    telemetry: dict | None = None,
) -> tuple[np.ndarray, DeltaState]:
    """Advance the cell by one token.

    ``x_t`` is the (hidden,) mixer input (already normalized by the block).
    Projections go through the causal short conv (tail carried in ``state``)
    and SiLU; keys are unit-normalized per head; the output gate multiplies
    the memory read elementwise before the output projection.
    """
    cfg = params.cfg
    q_c, q_tail = causal_conv_step(x_t @ params.w_q, params.conv_q, state.conv_q_tail)
    k_c, k_tail = causal_conv_step(x_t @ params.w_k, params.conv_k, state.conv_k_tail)
    v_c, v_tail = causal_conv_step(x_t @ params.w_v, params.conv_v, state.conv_v_tail)
    q = silu(q_c).reshape(cfg.n_heads, cfg.d_k)
    k = _normalize_keys(silu(k_c).reshape(cfg.n_heads, cfg.d_k))
    v = silu(v_c).reshape(cfg.n_heads, cfg.d_v)
    alpha, beta = gdn_gates(x_t, params)
    o, s_next = gdn_step(q, k, v, alpha, beta, state.s)
    gate = sigmoid(x_t @ params.w_gate)
    y = (o.reshape(-1) * gate) @ params.w_out
    if telemetry is not None:
        telemetry["alpha"] = alpha
        telemetry["beta"] = beta
        telemetry["v_norms"] = np.sqrt(np.sum(v * v, axis=-1))
        telemetry["head_norms"] = np.sqrt(np.sum(s_next * s_next, axis=(1, 2)))
    new_state = DeltaState(
        s=s_next, conv_q_tail=q_tail, conv_k_tail=k_tail, conv_v_tail=v_tail
    )
    return y, new_state


def gdn_cell_forward_sequence(
    x: np.ndarray, params: GdnCellParams, state: DeltaState
) -> tuple[np.ndarray, DeltaState]:
    """Whole-sequence form of the cell; same math as stepping token-by-token.

    ``x`` is (L, hidden). Uses the chunkwise kernel internally.
    """
    cfg = params.cfg
    q_c, q_tail = causal_conv(x @ params.w_q, params.conv_q, state.conv_q_tail)
    k_c, k_tail = causal_conv(x @ params.w_k, params.conv_k, state.conv_k_tail)
    v_c, v_tail = causal_conv(x @ params.w_v, params.conv_v, state.conv_v_tail)
    length = x.shape[0]
    q = silu(q_c).reshape(length, cfg.n_heads, cfg.d_k).transpose(1, 0, 2)
    k = _normalize_keys(
        silu(k_c).reshape(length, cfg.n_heads, cfg.d_k).transpose(1, 0, 2)
    )
    v = silu(v_c).reshape(length, cfg.n_heads, cfg.d_v).transpose(1, 0, 2)
    alpha, beta = gdn_gates(x, params)
    o, s_next = gdn_chunked(q, k, v, alpha.T, beta.T, state.s, cfg.chunk)
    o_flat = o.transpose(1, 0, 2).reshape(length, cfg.n_heads * cfg.d_v)
    gate = sigmoid(x @ params.w_gate)
    y = (o_flat * gate) @ params.w_out
    new_state = DeltaState(
        s=s_next, conv_q_tail=q_tail, conv_k_tail=k_tail, conv_v_tail=v_tail
    )
    return y, new_state
