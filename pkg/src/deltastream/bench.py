"""Streaming benchmark harness: per-token latency, state-byte accounting,
frame throughput, memory-norm telemetry, and the cross-module verify suite.

Latency numbers are hardware-bound and never asserted as absolute values;
what the harness pins down are the laws the architecture implies: constant
state bytes and flat latency for the hybrid stack versus affine growth and
degrading throughput for the full-attention baseline.
"""

from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import deltanet, losses
from .attention import full_attention, swa_step
from .core import Rng
from .errors import ConfigError
from .model import (
    ModelConfig,
    StreamSession,
    build_model,
    forward_sequence,
    load_preset,
    state_bytes,
    stream_step,
)

DEFAULT_WARMUP = 64
DEFAULT_TOKENS_PER_FRAME = 274


@dataclass(frozen=True)
class BenchPlan:
    """One benchmark run description.

    ``total_steps`` counts tokens in token-stream mode and frames in
    frame-stream mode. ``clock`` picks the latency timebase: "cpu"
    (thread CPU time; immune to scheduler stalls, so it reflects the
    per-token work law even on shared machines) or "wall" (perf counter).
    Both are monotonic.
    """

    config: ModelConfig
    config_name: str = "custom"
    mode: str = "token-stream"
    total_steps: int = 0
    tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME
    warmup_steps: int = DEFAULT_WARMUP
    repeats: int = 1
    seed: int = 0
    clock: str = "wall"

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.mode not in ("token-stream", "frame-stream"):
            raise ConfigError(f"unknown bench mode {self.mode!r}")
        if self.mode == "frame-stream" and self.tokens_per_frame < 1:
            raise ConfigError("frame mode requires tokens_per_frame >= 1")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.clock not in ("cpu", "wall"):
            raise ConfigError(f"clock must be 'cpu' or 'wall', got {self.clock!r}")

    def clock_ns(self):
        return time.thread_time_ns if self.clock == "cpu" else time.perf_counter_ns


def resolve_config(
    preset: str | None = None,
    config: ModelConfig | dict | None = None,
    baseline: bool = False,
) -> tuple[ModelConfig, str]:
    """Turn CLI/service-level inputs into a concrete ModelConfig."""
    if config is not None and preset is not None:
        raise ConfigError("give either a preset name or a config, not both")
    if config is None:
        name = preset or "micro"
        cfg = load_preset(name)
    else:
        cfg = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config)
        name = "custom"
    if baseline and not cfg.baseline_mode:
        cfg = replace(cfg, baseline_mode=True)
    if baseline:
        name = f"{name}+baseline"
    return cfg, name


@dataclass
class BenchRecord:
    step: int
    latency_ns: int
    state_bytes: int
    cache_norms: tuple[float, ...]


@dataclass
class FrameRecord:
    frame: int
    latency_ns: int
    fps: float
    state_bytes: int
    cache_norms: tuple[float, ...]


def least_squares_slope(y) -> float:
    """Slope of the least-squares line through (0, y0), (1, y1), ..."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 2:
        return 0.0
    x = np.arange(n, dtype=np.float64)
    x_c = x - x.mean()
    return float(np.dot(x_c, y - y.mean()) / np.dot(x_c, x_c))


def _decile_ratio(latencies: np.ndarray) -> float:
    """Mean of the last decile over the mean of the first decile."""
    n = latencies.size
    k = max(1, n // 10)
    return float(latencies[-k:].mean() / latencies[:k].mean())


def _run_token_stream(plan: BenchPlan) -> list[BenchRecord]:
    # Timings run single-threaded: dynamic BLAS threading on small operands
    # is a major source of latency flapping on shared machines.
    with threadpool_limits(limits=1):
        params, _ = build_model(plan.config, plan.seed)
        session = StreamSession.new(params)
        rng = Rng(plan.seed)
        tokens = rng.integers(
            plan.config.vocab, size=plan.warmup_steps + plan.total_steps
        )
        for t in tokens[: plan.warmup_steps]:
            stream_step(params, session, int(t))
        records = []
        clock = plan.clock_ns()
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for i in range(plan.total_steps):
                token = int(tokens[plan.warmup_steps + i])
                t0 = clock()
                stream_step(params, session, token)
                t1 = clock()
                records.append(
                    BenchRecord(
                        step=session.step,
                        latency_ns=max(1, t1 - t0),
                        state_bytes=state_bytes(session).total,
                        cache_norms=tuple(session.gdn_norms()),
                    )
                )
        finally:
            if gc_was_enabled:
                gc.enable()
    return records


def run_token_bench(plan: BenchPlan) -> tuple[list[BenchRecord], dict]:
    """Token-by-token latency benchmark.

    Returns the per-step records of the first run and a summary whose
    latency statistics are medians across ``plan.repeats`` runs.
    """
    if plan.mode != "token-stream":
        raise ConfigError(f"token bench needs token-stream mode, got {plan.mode!r}")
    if plan.total_steps == 0:
        return [], {"empty": True, "steps": 0, "config": plan.config_name}
    all_runs = [_run_token_stream(plan) for _ in range(plan.repeats)]
    records = all_runs[0]
    slopes, ratios, medians = [], [], []
    for run in all_runs:
        lat = np.array([r.latency_ns for r in run], dtype=np.float64)
        slopes.append(least_squares_slope(lat))
        ratios.append(_decile_ratio(lat))
        medians.append(float(np.median(lat)))
    bytes_seq = [r.state_bytes for r in records]
    summary = {
        "empty": False,
        "config": plan.config_name,
        "steps": plan.total_steps,
        "warmup_steps": plan.warmup_steps,
        "repeats": plan.repeats,
        "latency_slope_ns_per_step": float(np.median(slopes)),
        "latency_ratio_last_to_first_decile": float(np.median(ratios)),
        "latency_median_ns": float(np.median(medians)),
        "state_bytes_first": bytes_seq[0],
        "state_bytes_last": bytes_seq[-1],
        "state_bytes_constant": len(set(bytes_seq)) == 1,
        "state_bytes_strictly_increasing": all(
            b2 > b1 for b1, b2 in zip(bytes_seq, bytes_seq[1:])
        ),
    }
    return records, summary


def _run_frame_stream(plan: BenchPlan) -> list[FrameRecord]:
    with threadpool_limits(limits=1):
        params, _ = build_model(plan.config, plan.seed)
        session = StreamSession.new(params)
        rng = Rng(plan.seed)
        total_tokens = (plan.warmup_steps + plan.total_steps) * plan.tokens_per_frame
        tokens = rng.integers(plan.config.vocab, size=total_tokens)
        pos = 0
        for _ in range(plan.warmup_steps * plan.tokens_per_frame):
            stream_step(params, session, int(tokens[pos]))
            pos += 1
        records = []
        clock = plan.clock_ns()
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for f in range(plan.total_steps):
                t0 = clock()
                for _ in range(plan.tokens_per_frame):
                    stream_step(params, session, int(tokens[pos]))
                    pos += 1
                t1 = clock()
                lat = max(1, t1 - t0)
                records.append(
                    FrameRecord(
                        frame=f,
                        latency_ns=lat,
                        fps=1e9 / lat,
                        state_bytes=state_bytes(session).total,
                        cache_norms=tuple(session.gdn_norms()),
                    )
                )
        finally:
            if gc_was_enabled:
                gc.enable()
    return records


def run_frame_bench(plan: BenchPlan) -> tuple[list[FrameRecord], dict]:
    """Frame-stream benchmark: one session retained across frames, each frame
    feeding ``tokens_per_frame`` tokens; reports per-frame FPS and its slope.

    ``fps_relative_drift`` is the fitted FPS change across the whole run as a
    fraction of the mean FPS (a flat curve gives ~0).
    """
    if plan.mode != "frame-stream":
        raise ConfigError(f"frame bench needs frame-stream mode, got {plan.mode!r}")
    if plan.total_steps == 0:
        return [], {"empty": True, "frames": 0, "config": plan.config_name}
    all_runs = [_run_frame_stream(plan) for _ in range(plan.repeats)]
    records = all_runs[0]
    slopes, drifts, means = [], [], []
    for run in all_runs:
        fps = np.array([r.fps for r in run], dtype=np.float64)
        slope = least_squares_slope(fps)
        slopes.append(slope)
        means.append(float(fps.mean()))
        drifts.append(slope * (fps.size - 1) / fps.mean() if fps.size > 1 else 0.0)
    summary = {
        "empty": False,
        "config": plan.config_name,
        "frames": plan.total_steps,
        "tokens_per_frame": plan.tokens_per_frame,
        "repeats": plan.repeats,
        "fps_mean": float(np.median(means)),
        "fps_slope_per_frame": float(np.median(slopes)),
        "fps_relative_drift": float(np.median(drifts)),
        "fps_slope_negative": float(np.median(slopes)) < 0.0,
        "state_bytes_first": records[0].state_bytes,
        "state_bytes_last": records[-1].state_bytes,
    }
    return records, summary


# ---------------------------------------------------------------------------
# Memory-norm telemetry
# ---------------------------------------------------------------------------


@dataclass
class TraceResult:
    records: list[BenchRecord]
    telemetry: list[list[dict]]  # per step, per delta-rule layer
    gdn_layer_indices: list[int]


def cache_norm_trace(plan: BenchPlan) -> TraceResult:
    """Track the Frobenius norm of every delta-rule memory after each step.

    Telemetry carries the realized per-head gates and value norms so the
    per-step bound ||S_t|| <= alpha ||S_{t-1}|| + beta ||v_t|| can be checked
    externally. Requires a hybrid (non-baseline) configuration.
    """
    cfg = plan.config
    if cfg.baseline_mode or "gdn" not in cfg.layer_pattern():
        raise ConfigError("cache_norm_trace needs a config with delta-rule layers")
    params, _ = build_model(cfg, plan.seed)
    session = StreamSession.new(params, record_telemetry=True)
    rng = Rng(plan.seed)
    tokens = rng.integers(cfg.vocab, size=plan.total_steps)
    records, telemetry = [], []
    clock = plan.clock_ns()
    for i in range(plan.total_steps):
        t0 = clock()
        stream_step(params, session, int(tokens[i]))
        t1 = clock()
        records.append(
            BenchRecord(
                step=session.step,
                latency_ns=max(1, t1 - t0),
                state_bytes=state_bytes(session).total,
                cache_norms=tuple(session.gdn_norms()),
            )
        )
        telemetry.append(session.telemetry["gdn_layers"])
    return TraceResult(
        records=records,
        telemetry=telemetry,
        gdn_layer_indices=session.gdn_layer_indices(),
    )


def plateau_relative_range(norms: np.ndarray) -> float:
    """(max - min) / mean over the second half of a norm trace."""
    half = norms[norms.size // 2 :]
    return float((half.max() - half.min()) / half.mean())


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def bench_csv_header(n_norm_layers: int) -> list[str]:
    return ["step", "latency_ns", "state_bytes"] + [
        f"norm_layer_{i}" for i in range(n_norm_layers)
    ]


def write_bench_csv(records: list[BenchRecord], path: str) -> None:
    n_norms = len(records[0].cache_norms) if records else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(bench_csv_header(n_norms))
        for r in records:
            writer.writerow(
                [r.step, r.latency_ns, r.state_bytes, *[repr(x) for x in r.cache_norms]]
            )


def frame_csv_header(n_norm_layers: int) -> list[str]:
    return ["frame", "latency_ns", "fps", "state_bytes"] + [
        f"norm_layer_{i}" for i in range(n_norm_layers)
    ]


def write_frame_csv(records: list[FrameRecord], path: str) -> None:
    n_norms = len(records[0].cache_norms) if records else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(frame_csv_header(n_norms))
        for r in records:
            writer.writerow(
                [r.frame, r.latency_ns, repr(r.fps), r.state_bytes,
                 *[repr(x) for x in r.cache_norms]]
            )


# ---------------------------------------------------------------------------
# Verify suite
# ---------------------------------------------------------------------------


@dataclass
class VerifyCheck:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "detail": self.detail,
        }


@dataclass
class VerifyReport:
    suite: str
    checks: list[VerifyCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
        }


def _check(name, max_error, tolerance, detail="") -> VerifyCheck:
    return VerifyCheck(
        name=name,
        passed=bool(max_error <= tolerance),
        max_error=float(max_error),
        tolerance=float(tolerance),
        detail=detail,
    )


def _verify_equivalence(checks: list[VerifyCheck], chunk_perturbation: float) -> None:
    rng = Rng(11)
    n_heads, length, d_k, d_v = 2, 96, 8, 12
    q = rng.normal((n_heads, length, d_k))
    k = rng.normal((n_heads, length, d_k))
    k = k / np.linalg.norm(k, axis=-1, keepdims=True)
    v = rng.normal((n_heads, length, d_v))
    alpha = rng.uniform(0.5, 1.0, (n_heads, length))
    beta = rng.uniform(0.0, 1.0, (n_heads, length))
    s0 = rng.normal((n_heads, d_v, d_k))
    o_ref, s_ref = deltanet.gdn_step_loop(q, k, v, alpha, beta, s0)
    worst = 0.0
    for chunk in (1, 2, 7, 64, length):
        o_c, s_c = deltanet.gdn_chunked(q, k, v, alpha, beta, s0, chunk)
        o_c = o_c + chunk_perturbation
        worst = max(
            worst,
            float(np.max(np.abs(o_c - o_ref))),
            float(np.max(np.abs(s_c - s_ref))),
        )
    checks.append(
        _check("chunked_vs_recurrent", worst, 1e-10, "chunks {1,2,7,64,L}, L=96")
    )

    cfg = load_preset("micro")
    params, _ = build_model(cfg, seed=5)
    tokens = Rng(6).integers(cfg.vocab, size=24)
    batch_logits = forward_sequence(params, tokens)
    session = StreamSession.new(params)
    worst = 0.0
    for i, t in enumerate(tokens):
        step_logits, _ = stream_step(params, session, int(t))
        worst = max(worst, float(np.max(np.abs(step_logits - batch_logits[i]))))
    checks.append(_check("streaming_vs_batch", worst, 1e-9, "micro config, 24 steps"))

    attn_cfg = replace(cfg, window=64).attn_config()
    length = 16
    rng = Rng(7)
    q = rng.normal((attn_cfg.n_query_heads, length, attn_cfg.head_dim))
    k = rng.normal((attn_cfg.n_kv_heads, length, attn_cfg.head_dim))
    v = rng.normal((attn_cfg.n_kv_heads, length, attn_cfg.head_dim))
    full = full_attention(q, k, v, causal=True)
    from .attention import SwaCache

    cache = SwaCache(attn_cfg)
    worst = 0.0
    for t in range(length):
        o_t, _ = swa_step(q[:, t], k[:, t], v[:, t], cache)
        worst = max(worst, float(np.max(np.abs(o_t - full[:, t]))))
    checks.append(_check("swa_vs_full", worst, 1e-10, f"window {attn_cfg.window} >= L"))


def _verify_gradients(checks: list[VerifyCheck]) -> None:
    worst = 0.0
    for seed in range(5):
        worst = max(worst, _gdn_backward_fd_error(seed))
    checks.append(_check("gdn_backward_finite_difference", worst, 1e-4, "5 seeds"))
    for loss_name in ("mse", "kl", "ce"):
        err = losses.loss_grad_check(loss_name, seed=3)
        checks.append(_check(f"loss_gradient_{loss_name}", err, 1e-6))


def _gdn_backward_fd_error(seed: int, length: int = 6) -> float:
    rng = Rng(1000 + seed)
    n_heads, d_k, d_v = 2, 4, 4
    q = rng.normal((n_heads, length, d_k), 0.7)
    k = rng.normal((n_heads, length, d_k), 0.7)
    v = rng.normal((n_heads, length, d_v), 0.7)
    alpha = rng.uniform(0.6, 0.99, (n_heads, length))
    beta = rng.uniform(0.1, 0.9, (n_heads, length))
    s0 = rng.normal((n_heads, d_v, d_k), 0.5)
    d_out = rng.normal((n_heads, length, d_v))
    grads = deltanet.gdn_backward(q, k, v, alpha, beta, s0, d_out, chunk=3)

    def objective(q_, k_, v_, a_, b_, s_):
        o, _ = deltanet.gdn_step_loop(q_, k_, v_, a_, b_, s_)
        return float(np.sum(o * d_out))

    worst = 0.0
    arrays = {"q": q, "k": k, "v": v, "alpha": alpha, "beta": beta, "s0": s0}
    analytic = {
        "q": grads.q, "k": grads.k, "v": grads.v,
        "alpha": grads.alpha, "beta": grads.beta, "s0": grads.s0,
    }
    h = losses.FD_STEP
    for name, arr in arrays.items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            hi = objective(q, k, v, alpha, beta, s0)
            arr[idx] = orig - h
            lo = objective(q, k, v, alpha, beta, s0)
            arr[idx] = orig
            fd = (hi - lo) / (2 * h)
            a = analytic[name][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


def _verify_invariants(checks: list[VerifyCheck]) -> None:
    # Per-step norm bound with realized gates on a live cell stream.
    cfg = load_preset("micro")
    plan = BenchPlan(config=cfg, config_name="micro", total_steps=192, seed=3)
    trace = cache_norm_trace(plan)
    worst = 0.0
    prev = [np.zeros(cfg.gdn.n_heads) for _ in trace.gdn_layer_indices]
    for step_telem in trace.telemetry:
        for li, cell in enumerate(step_telem):
            bound = cell["alpha"] * prev[li] + cell["beta"] * cell["v_norms"]
            excess = float(np.max(cell["head_norms"] - bound))
            worst = max(worst, excess)
            prev[li] = cell["head_norms"]
    checks.append(
        _check("state_norm_step_bound", worst, 1e-9,
               "||S_t|| <= a||S_{t-1}|| + b||v||, per head, 192 steps")
    )

    # Delta-rule retrieval through orthonormal keys.
    rng = Rng(21)
    d_k, d_v, m = 16, 12, 16
    keys, _ = np.linalg.qr(rng.normal((d_k, d_k)))
    values = rng.normal((m, d_v))
    s = np.zeros((1, d_v, d_k))
    ones = np.ones(1)
    for j in range(m):
        _, s = deltanet.gdn_step(
            keys[:, j][None, :], keys[:, j][None, :], values[j][None, :],
            ones, ones, s,
        )
    worst = 0.0
    for j in range(m):
        got = np.einsum("hvk,hk->hv", s, keys[:, j][None, :])[0]
        worst = max(worst, float(np.max(np.abs(got - values[j]))))
    checks.append(_check("delta_rule_retrieval", worst, 1e-10, f"{m} pairs"))

    # Constant-state law for the hybrid stack.
    small = replace(cfg, window=16)
    params, _ = build_model(small, seed=2)
    session = StreamSession.new(params)
    tokens = Rng(4).integers(small.vocab, size=small.window * 2)
    sizes = {}
    for i, t in enumerate(tokens):
        stream_step(params, session, int(t))
        if i + 1 in (small.window, 2 * small.window):
            sizes[i + 1] = state_bytes(session).total
    diff = abs(sizes[small.window] - sizes[2 * small.window])
    checks.append(
        _check("hybrid_state_bytes_constant", diff, 0.0,
               f"steps {small.window} and {2 * small.window}")
    )

    # Exact per-step growth for the baseline.
    base = replace(small, baseline_mode=True)
    params_b, _ = build_model(base, seed=2)
    session_b = StreamSession.new(params_b)
    expected = 2 * base.n_kv_heads * base.head_dim * 8 * base.n_layers
    prev_total = state_bytes(session_b).total
    worst = 0.0
    for t in tokens[:12]:
        stream_step(params_b, session_b, int(t))
        total = state_bytes(session_b).total
        worst = max(worst, abs(total - prev_total - expected))
        prev_total = total
    checks.append(
        _check("baseline_state_bytes_growth", worst, 0.0,
               f"{expected} bytes per step")
    )


def verify(suite: str = "all", _chunk_perturbation: float = 0.0) -> VerifyReport:
    """Run the cross-module oracle suites and return a machine-readable
    report. ``_chunk_perturbation`` exists to prove the detector trips."""
    suites = ("equivalence", "gradients", "invariants")
    if suite != "all" and suite not in suites:
        raise ConfigError(f"suite must be one of {suites + ('all',)}, got {suite!r}")
    report = VerifyReport(suite=suite)
    if suite in ("equivalence", "all"):
        _verify_equivalence(report.checks, _chunk_perturbation)
    if suite in ("gradients", "all"):
        _verify_gradients(report.checks)
    if suite in ("invariants", "all"):
        _verify_invariants(report.checks)
    return report
