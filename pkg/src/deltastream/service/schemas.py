"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ConfigSelector(BaseModel):
    """Pick a shipped preset or supply a full config document."""

    preset: Optional[str] = None
    config: Optional[dict] = None
    baseline: bool = False


class ShapeRequest(ConfigSelector):
    seq_len: int = Field(default=1, ge=1)


class ShapeReport(BaseModel):
    n_blocks: int
    layers_per_block: int
    n_layers: int
    pattern_per_block: list[list[str]]
    n_swa_layers: int
    n_gdn_layers: int
    n_full_layers: int
    hidden: int
    window: int
    mlp_hidden: int
    vocab: int
    gdn_state_shape: list[int]
    gdn_state_bytes_per_layer: int
    swa_cache_shape: list[int]
    logits_shape: list[int]
    total_params: int
    weights_allocated: bool


class TokenBenchRequest(ConfigSelector):
    steps: int = Field(default=1024, ge=0)
    warmup_steps: int = Field(default=64, ge=0)
    repeats: int = Field(default=1, ge=1)
    seed: int = 0


class BenchRecordModel(BaseModel):
    step: int
    latency_ns: int
    state_bytes: int
    cache_norms: list[float]


class TokenBenchResponse(BaseModel):
    records: list[BenchRecordModel]
    summary: dict


class FrameBenchRequest(ConfigSelector):
    frames: int = Field(default=100, ge=0)
    tokens_per_frame: int = Field(default=274, ge=1)
    warmup_steps: int = Field(default=16, ge=0)
    repeats: int = Field(default=1, ge=1)
    seed: int = 0


class FrameRecordModel(BaseModel):
    frame: int
    latency_ns: int
    fps: float
    state_bytes: int
    cache_norms: list[float]


class FrameBenchResponse(BaseModel):
    records: list[FrameRecordModel]
    summary: dict


class TraceRequest(ConfigSelector):
    steps: int = Field(default=512, ge=1)
    seed: int = 0


class TraceResponse(BaseModel):
    records: list[BenchRecordModel]
    gdn_layer_indices: list[int]


class VerifyRequest(BaseModel):
    suite: Literal["equivalence", "gradients", "invariants", "all"] = "all"


class VerifyCheckModel(BaseModel):
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""


class VerifyResponse(BaseModel):
    suite: str
    passed: bool
    checks: list[VerifyCheckModel]


class SessionCreateRequest(ConfigSelector):
    seed: int = 0


class SessionInfo(BaseModel):
    session_id: str
    config_name: str
    pattern: list[str]
    step: int
    state_bytes_total: int


class StepRequest(BaseModel):
    token: int = Field(ge=0)


class StepResponse(BaseModel):
    step: int
    state_bytes_total: int
    logits: list[float]


class SessionStateResponse(BaseModel):
    session_id: str
    step: int
    per_layer: list[dict]
    state_bytes_total: int
    gdn_norms: list[float]


class AlignRequest(ConfigSelector):
    n_layers: int = Field(default=2, ge=1)
    seq_len: int = Field(default=16, ge=1)
    teacher_seed: int = 0
    student_seed: int = 1


class AlignRecordModel(BaseModel):
    layer_index: int
    loss: float
    teacher_out_norm: float
    student_out_norm: float
    input_source: str


class AlignResponse(BaseModel):
    records: list[AlignRecordModel]
