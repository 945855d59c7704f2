"""Hybrid block stack: sliding-window attention interleaved with gated
delta-rule layers, each followed by a gated-SiLU MLP.

Two execution forms are provided and kept numerically interchangeable:
``forward_sequence`` consumes a whole token sequence at once (chunkwise
delta-rule kernel, masked windowed attention), while ``stream_step``
advances a ``StreamSession`` one token at a time against fixed-size
per-layer state. A ``baseline_mode`` configuration replaces every mixer
with full causal attention over an unbounded KV cache, which is the
reference point for the latency/memory comparisons in the bench harness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import deltanet
from .attention import (
    AttnConfig,
    FullCache,
    SwaCache,
    full_state_bytes,
    full_step,
    swa_state_bytes,
    swa_step,
    windowed_attention,
)
from .core import DEFAULT_ROPE_BASE, Rng, init_weight, rms_norm, rope_rows, silu
from .deltanet import DeltaState, GdnCellParams, GdnConfig
from .errors import ConfigError, InputError, SessionError

ALLOWED_RATIOS = (0.0, 0.125, 0.25, 0.5)
_RATIO_STRINGS = {"0": 0.0, "1/8": 0.125, "1/4": 0.25, "1/2": 0.5}


@dataclass(frozen=True)
class ModelConfig:
    """All architectural hyperparameters; loadable from JSON."""

    hidden: int
    n_blocks: int
    layers_per_block: int
    hybrid_ratio: float
    n_query_heads: int
    n_kv_heads: int
    head_dim: int
    window: int
    mlp_hidden: int
    vocab: int
    gdn: GdnConfig
    baseline_mode: bool = False
    rope_base: float = DEFAULT_ROPE_BASE

    def __post_init__(self):
        if self.hybrid_ratio not in ALLOWED_RATIOS:
            raise ConfigError(
                f"hybrid_ratio must be one of {{0, 1/8, 1/4, 1/2}}, "
                f"got {self.hybrid_ratio}"
            )
        for name in ("hidden", "n_blocks", "layers_per_block", "window",
                     "mlp_hidden", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        # AttnConfig re-validates head geometry.
        self.attn_config()

    @property
    def n_layers(self) -> int:
        return self.n_blocks * self.layers_per_block

    def attn_config(self) -> AttnConfig:
        return AttnConfig(
            n_query_heads=self.n_query_heads,
            n_kv_heads=self.n_kv_heads,
            head_dim=self.head_dim,
            window=self.window,
            rope_base=self.rope_base,
        )

    def layer_pattern(self) -> list[str]:
        """Mixer kind per layer: 'full' everywhere in baseline mode,
        otherwise 'swa' at the start of every run of 1/ratio layers and
        'gdn' elsewhere."""
        if self.baseline_mode:
            return ["full"] * self.n_layers
        if self.hybrid_ratio == 0.0:
            return ["gdn"] * self.n_layers
        stride = round(1.0 / self.hybrid_ratio)
        return ["swa" if i % stride == 0 else "gdn" for i in range(self.n_layers)]

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        ratio = data.get("hybrid_ratio")
        if isinstance(ratio, str):
            if ratio not in _RATIO_STRINGS:
                raise ConfigError(f"unknown hybrid_ratio {ratio!r}")
            data["hybrid_ratio"] = _RATIO_STRINGS[ratio]
        gdn = data.get("gdn")
        if isinstance(gdn, dict):
            data["gdn"] = GdnConfig(**gdn)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str) -> "ModelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_preset(name: str) -> ModelConfig:
    """Load one of the shipped configuration presets."""
    try:
        text = resources.files("deltastream.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return ModelConfig.from_dict(json.loads(text))


def preset_names() -> list[str]:
    files = resources.files("deltastream.presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class AttnLayerParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray


@dataclass
class MlpParams:
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class LayerParams:
    kind: str  # "swa" | "gdn" | "full"
    norm1: np.ndarray
    mixer: AttnLayerParams | GdnCellParams
    norm2: np.ndarray
    mlp: MlpParams


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerParams]
    final_norm: np.ndarray
    w_head: np.ndarray


def _init_attn_layer(cfg: ModelConfig, rng: Rng) -> AttnLayerParams:
    q_dim = cfg.n_query_heads * cfg.head_dim
    kv_dim = cfg.n_kv_heads * cfg.head_dim
    return AttnLayerParams(
        w_q=init_weight(rng, (cfg.hidden, q_dim)),
        w_k=init_weight(rng, (cfg.hidden, kv_dim)),
        w_v=init_weight(rng, (cfg.hidden, kv_dim)),
        w_out=init_weight(rng, (q_dim, cfg.hidden)),
    )


def _init_mlp(cfg: ModelConfig, rng: Rng) -> MlpParams:
    return MlpParams(
        w_gate=init_weight(rng, (cfg.hidden, cfg.mlp_hidden)),
        w_up=init_weight(rng, (cfg.hidden, cfg.mlp_hidden)),
        w_down=init_weight(rng, (cfg.mlp_hidden, cfg.hidden)),
    )


def init_layer(cfg: ModelConfig, kind: str, rng: Rng) -> LayerParams:
    if kind in ("swa", "full"):
        mixer = _init_attn_layer(cfg, rng)
    elif kind == "gdn":
        mixer = deltanet.init_gdn_cell(cfg.gdn, cfg.hidden, rng)
    else:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return LayerParams(
        kind=kind,
        norm1=np.ones(cfg.hidden, dtype=np.float64),
        mixer=mixer,
        norm2=np.ones(cfg.hidden, dtype=np.float64),
        mlp=_init_mlp(cfg, rng),
    )


def build_model(config: ModelConfig, seed: int) -> tuple[ModelParams, list[str]]:
    """Deterministically initialize all weights; returns (params, pattern)."""
    rng = Rng(seed)
    pattern = config.layer_pattern()
    embedding = init_weight(rng, (config.vocab, config.hidden))
    layers = [init_layer(config, kind, rng) for kind in pattern]
    params = ModelParams(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=np.ones(config.hidden, dtype=np.float64),
        w_head=init_weight(rng, (config.hidden, config.vocab)),
    )
    return params, pattern


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Gated-SiLU MLP: silu(x W_gate) * (x W_up) W_down."""
    return (silu(x @ p.w_gate) * (x @ p.w_up)) @ p.w_down


def attention_mixer_sequence(
    p: AttnLayerParams,
    x_normed: np.ndarray,
    cfg: ModelConfig,
    window: int | None,
    start_pos: int = 0,
) -> np.ndarray:
    """Attention sublayer over a normalized sequence (no residual).

    ``window=None`` means unrestricted causal attention; rotary positions
    start at ``start_pos``.
    """
    length = x_normed.shape[0]
    positions = np.arange(start_pos, start_pos + length)
    q = rope_rows(
        (x_normed @ p.w_q).reshape(length * cfg.n_query_heads, cfg.head_dim),
        np.repeat(positions, cfg.n_query_heads),
        cfg.rope_base,
    ).reshape(length, cfg.n_query_heads, cfg.head_dim)
    k = rope_rows(
        (x_normed @ p.w_k).reshape(length * cfg.n_kv_heads, cfg.head_dim),
        np.repeat(positions, cfg.n_kv_heads),
        cfg.rope_base,
    ).reshape(length, cfg.n_kv_heads, cfg.head_dim)
    v = (x_normed @ p.w_v).reshape(length, cfg.n_kv_heads, cfg.head_dim)
    q_t = q.transpose(1, 0, 2)
    k_t = k.transpose(1, 0, 2)
    v_t = v.transpose(1, 0, 2)
    if window is None:
        from .attention import full_attention

        o = full_attention(q_t, k_t, v_t, causal=True)
    else:
        o = windowed_attention(q_t, k_t, v_t, window)
    o_flat = o.transpose(1, 0, 2).reshape(length, -1)
    return o_flat @ p.w_out


def gdn_mixer_sequence(
    p: GdnCellParams, x_normed: np.ndarray, state: DeltaState | None = None
) -> tuple[np.ndarray, DeltaState]:
    if state is None:
        state = DeltaState.zeros(p.cfg)
    return deltanet.gdn_cell_forward_sequence(x_normed, p, state)


def layer_forward_sequence(
    layer: LayerParams, x: np.ndarray, cfg: ModelConfig, start_pos: int = 0
) -> np.ndarray:
    """One block: pre-norm mixer + residual, pre-norm MLP + residual."""
    h = rms_norm(x, layer.norm1)
    if layer.kind == "swa":
        mixed = attention_mixer_sequence(layer.mixer, h, cfg, cfg.window, start_pos)
    elif layer.kind == "full":
        mixed = attention_mixer_sequence(layer.mixer, h, cfg, None, start_pos)
    else:
        mixed, _ = gdn_mixer_sequence(layer.mixer, h)
    x = x + mixed
    x = x + mlp_forward(layer.mlp, rms_norm(x, layer.norm2))
    return x


def forward_sequence(params: ModelParams, tokens) -> np.ndarray:
    """Full forward over token ids; returns (L, vocab) logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    cfg = params.config
    if tokens.ndim != 1:
        raise InputError("tokens must be a 1-D id sequence")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise InputError(f"token ids must be in [0, {cfg.vocab})")
    x = params.embedding[tokens]
    for layer in params.layers:
        x = layer_forward_sequence(layer, x, cfg)
    x = rms_norm(x, params.final_norm)
    return x @ params.w_head


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------


@dataclass
class StreamSession:
    """Ordered per-layer state plus a step counter for one token stream.

    Exclusively owned while a step is in flight; independent sessions can
    run in parallel against shared immutable params.
    """

    config: ModelConfig
    layer_states: list
    step: int = 0
    record_telemetry: bool = False
    telemetry: dict = field(default_factory=dict)

    @classmethod
    def new(cls, params: ModelParams, record_telemetry: bool = False):
        cfg = params.config
        states = []
        for kind in cfg.layer_pattern():
            if kind == "swa":
                states.append(SwaCache(cfg.attn_config()))
            elif kind == "full":
                states.append(FullCache(cfg.attn_config()))
            else:
                states.append(DeltaState.zeros(cfg.gdn))
        return cls(config=cfg, layer_states=states,
                   record_telemetry=record_telemetry)

    def gdn_layer_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layer_states)
                if isinstance(s, DeltaState)]

    def gdn_norms(self) -> list[float]:
        """Frobenius norm of every delta-rule layer state, in layer order."""
        return [s.norm() for s in self.layer_states if isinstance(s, DeltaState)]


def _attn_mixer_step(p, x_row, cfg, cache, pos):
    q = rope_rows(
        (x_row @ p.w_q).reshape(cfg.n_query_heads, cfg.head_dim),
        np.full(cfg.n_query_heads, pos),
        cfg.rope_base,
    )
    k = rope_rows(
        (x_row @ p.w_k).reshape(cfg.n_kv_heads, cfg.head_dim),
        np.full(cfg.n_kv_heads, pos),
        cfg.rope_base,
    )
    v = (x_row @ p.w_v).reshape(cfg.n_kv_heads, cfg.head_dim)
    if isinstance(cache, SwaCache):
        o, _ = swa_step(q, k, v, cache)
    else:
        o, _ = full_step(q, k, v, cache)
    return o.reshape(-1) @ p.w_out


def stream_step(
    params: ModelParams, session: StreamSession, token: int
) -> tuple[np.ndarray, StreamSession]:
    """Advance every layer by one token; returns this token's logits."""
    cfg = params.config
    if session.config is not cfg and session.config != cfg:
        raise SessionError("session was built for a different config")
    if not 0 <= token < cfg.vocab:
        raise InputError(f"token id {token} out of range [0, {cfg.vocab})")
    x = params.embedding[token]
    telem = [] if session.record_telemetry else None
    for i, layer in enumerate(params.layers):
        h = rms_norm(x[None, :], layer.norm1)[0]
        if layer.kind == "gdn":
            cell_telem = {} if telem is not None else None
            mixed, new_state = deltanet.gdn_cell_forward(
                h, layer.mixer, session.layer_states[i], cell_telem
            )
            session.layer_states[i] = new_state
            if telem is not None:
                telem.append(cell_telem)
        else:
            mixed = _attn_mixer_step(
                layer.mixer, h, cfg, session.layer_states[i], session.step
            )
        x = x + mixed
        x = x + mlp_forward(layer.mlp, rms_norm(x[None, :], layer.norm2))[0]
    session.step += 1
    if telem is not None:
        session.telemetry = {"gdn_layers": telem}
    x = rms_norm(x[None, :], params.final_norm)[0]
    return x @ params.w_head, session


# ---------------------------------------------------------------------------
# State accounting and shape audit
# ---------------------------------------------------------------------------


@dataclass
class LayerStateBytes:
    index: int
    kind: str
    bytes: int


@dataclass
class StateBytesReport:
    per_layer: list[LayerStateBytes]
    total: int


def state_bytes(session: StreamSession) -> StateBytesReport:
    """Exact payload byte accounting of every layer's streaming state."""
    per_layer = []
    pattern = session.config.layer_pattern()
    for i, state in enumerate(session.layer_states):
        if isinstance(state, DeltaState):
            n = state.state_bytes()
        elif isinstance(state, SwaCache):
            n = swa_state_bytes(state)
        elif isinstance(state, FullCache):
            n = full_state_bytes(state)
        else:  # pragma: no cover
            raise SessionError(f"unknown state type {type(state)!r}")
        per_layer.append(LayerStateBytes(index=i, kind=pattern[i], bytes=n))
    return StateBytesReport(per_layer=per_layer, total=sum(p.bytes for p in per_layer))


def trace_shapes(config: ModelConfig, seq_len: int = 1) -> dict:
    """Shape-only dry run: report every structural shape without allocating
    any weights (the full-scale preset would need billions of parameters)."""
    pattern = config.layer_pattern()
    gdn = config.gdn
    q_dim = config.n_query_heads * config.head_dim
    kv_dim = config.n_kv_heads * config.head_dim
    mixer_params = {
        "swa": config.hidden * (q_dim + 2 * kv_dim) + q_dim * config.hidden,
        "full": config.hidden * (q_dim + 2 * kv_dim) + q_dim * config.hidden,
        "gdn": (
            config.hidden * (2 * gdn.n_heads * gdn.d_k + gdn.n_heads * gdn.d_v)
            + gdn.conv_width * (2 * gdn.n_heads * gdn.d_k + gdn.n_heads * gdn.d_v)
            + 2 * config.hidden * gdn.n_heads
            + config.hidden * gdn.n_heads * gdn.d_v
            + gdn.n_heads * gdn.d_v * config.hidden
        ),
    }
    mlp_params = 3 * config.hidden * config.mlp_hidden
    total_params = (
        2 * config.vocab * config.hidden
        + sum(mixer_params[k] + mlp_params + 2 * config.hidden for k in pattern)
        + config.hidden
    )
    blocks = [
        pattern[b * config.layers_per_block : (b + 1) * config.layers_per_block]
        for b in range(config.n_blocks)
    ]
    return {
        "n_blocks": config.n_blocks,
        "layers_per_block": config.layers_per_block,
        "n_layers": config.n_layers,
        "pattern_per_block": blocks,
        "n_swa_layers": pattern.count("swa"),
        "n_gdn_layers": pattern.count("gdn"),
        "n_full_layers": pattern.count("full"),
        "hidden": config.hidden,
        "window": config.window,
        "mlp_hidden": config.mlp_hidden,
        "vocab": config.vocab,
        "gdn_state_shape": [gdn.n_heads, gdn.d_k, gdn.d_v],
        "gdn_state_bytes_per_layer": gdn.n_heads * gdn.d_k * gdn.d_v * 8,
        "swa_cache_shape": [config.n_kv_heads, config.window, config.head_dim],
        "logits_shape": [seq_len, config.vocab],
        "total_params": total_params,
        "weights_allocated": False,
    }
