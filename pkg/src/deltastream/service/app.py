"""FastAPI service exposing the engine: streaming sessions, benchmarks,
norm traces, the verify suite, and the shape audit."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import bench, losses
from ..errors import ConfigError, DeltastreamError, InputError, SessionError
from ..model import (
    ModelParams,
    StreamSession,
    build_model,
    preset_names,
    state_bytes,
    stream_step,
    trace_shapes,
)
from . import schemas


@dataclass
class _LiveSession:
    session_id: str
    config_name: str
    params: ModelParams
    session: StreamSession
    pattern: list[str]
    lock: threading.Lock


class SessionStore:
    def __init__(self):
        self._sessions: dict[str, _LiveSession] = {}
        self._lock = threading.Lock()

    def add(self, live: _LiveSession) -> None:
        with self._lock:
            self._sessions[live.session_id] = live

    def get(self, session_id: str) -> _LiveSession:
        with self._lock:
            live = self._sessions.get(session_id)
        if live is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return live

    def remove(self, session_id: str) -> None:
        with self._lock:
            if session_id not in self._sessions:
                raise HTTPException(status_code=404, detail=f"no session {session_id}")
            del self._sessions[session_id]


def _resolve(selector: schemas.ConfigSelector):
    try:
        return bench.resolve_config(
            preset=selector.preset, config=selector.config, baseline=selector.baseline
        )
    except DeltastreamError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _bench_records(records) -> list[schemas.BenchRecordModel]:
    return [
        schemas.BenchRecordModel(
            step=r.step,
            latency_ns=r.latency_ns,
            state_bytes=r.state_bytes,
            cache_norms=list(r.cache_norms),
        )
        for r in records
    ]


def create_app() -> FastAPI:
    app = FastAPI(
        title="deltastream",
        description="Hybrid delta-rule / sliding-window streaming engine",
    )
    store = SessionStore()
    app.state.sessions = store

    @app.exception_handler(DeltastreamError)
    async def _domain_error(_, exc: DeltastreamError):
        from fastapi.responses import JSONResponse

        code = 409 if isinstance(exc, SessionError) else 422
        return JSONResponse(status_code=code, content={"detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/presets")
    def presets() -> dict:
        return {"presets": preset_names()}

    @app.post("/shapes", response_model=schemas.ShapeReport)
    def shapes(req: schemas.ShapeRequest):
        cfg, _ = _resolve(req)
        return schemas.ShapeReport(**trace_shapes(cfg, seq_len=req.seq_len))

    @app.post("/bench/tokens", response_model=schemas.TokenBenchResponse)
    def bench_tokens(req: schemas.TokenBenchRequest):
        cfg, name = _resolve(req)
        plan = bench.BenchPlan(
            config=cfg,
            config_name=name,
            mode="token-stream",
            total_steps=req.steps,
            warmup_steps=req.warmup_steps,
            repeats=req.repeats,
            seed=req.seed,
        )
        records, summary = bench.run_token_bench(plan)
        return schemas.TokenBenchResponse(records=_bench_records(records), summary=summary)

    @app.post("/bench/frames", response_model=schemas.FrameBenchResponse)
    def bench_frames(req: schemas.FrameBenchRequest):
        cfg, name = _resolve(req)
        plan = bench.BenchPlan(
            config=cfg,
            config_name=name,
            mode="frame-stream",
            total_steps=req.frames,
            tokens_per_frame=req.tokens_per_frame,
            warmup_steps=req.warmup_steps,
            repeats=req.repeats,
            seed=req.seed,
        )
        records, summary = bench.run_frame_bench(plan)
        models = [
            schemas.FrameRecordModel(
                frame=r.frame,
                latency_ns=r.latency_ns,
                fps=r.fps,
                state_bytes=r.state_bytes,
                cache_norms=list(r.cache_norms),
            )
            for r in records
        ]
        return schemas.FrameBenchResponse(records=models, summary=summary)

    @app.post("/trace/norms", response_model=schemas.TraceResponse)
    def trace_norms(req: schemas.TraceRequest):
        cfg, name = _resolve(req)
        plan = bench.BenchPlan(
            config=cfg, config_name=name, total_steps=req.steps, seed=req.seed
        )
        result = bench.cache_norm_trace(plan)
        return schemas.TraceResponse(
            records=_bench_records(result.records),
            gdn_layer_indices=result.gdn_layer_indices,
        )

    @app.post("/verify", response_model=schemas.VerifyResponse)
    def run_verify(req: schemas.VerifyRequest):
        report = bench.verify(req.suite)
        return schemas.VerifyResponse(
            suite=report.suite,
            passed=report.passed,
            checks=[schemas.VerifyCheckModel(**c.to_dict()) for c in report.checks],
        )

    @app.post("/align", response_model=schemas.AlignResponse)
    def align(req: schemas.AlignRequest):
        cfg, _ = _resolve(req)
        teacher = losses.build_teacher_stack(cfg, req.n_layers, req.teacher_seed)
        student = losses.build_student_stack(cfg, req.n_layers, req.student_seed)
        first = np.random.default_rng(req.teacher_seed).normal(
            size=(req.seq_len, cfg.hidden)
        )
        records = losses.align_stack(teacher, student, first, cfg)
        return schemas.AlignResponse(
            records=[
                schemas.AlignRecordModel(
                    layer_index=r.layer_index,
                    loss=r.loss,
                    teacher_out_norm=r.teacher_out_norm,
                    student_out_norm=r.student_out_norm,
                    input_source=r.input_source,
                )
                for r in records
            ]
        )

    @app.post("/sessions", response_model=schemas.SessionInfo)
    def create_session(req: schemas.SessionCreateRequest):
        cfg, name = _resolve(req)
        params, pattern = build_model(cfg, req.seed)
        live = _LiveSession(
            session_id=uuid.uuid4().hex,
            config_name=name,
            params=params,
            session=StreamSession.new(params),
            pattern=pattern,
            lock=threading.Lock(),
        )
        store.add(live)
        return schemas.SessionInfo(
            session_id=live.session_id,
            config_name=name,
            pattern=pattern,
            step=0,
            state_bytes_total=state_bytes(live.session).total,
        )

    @app.get("/sessions/{session_id}", response_model=schemas.SessionInfo)
    def session_info(session_id: str):
        live = store.get(session_id)
        return schemas.SessionInfo(
            session_id=live.session_id,
            config_name=live.config_name,
            pattern=live.pattern,
            step=live.session.step,
            state_bytes_total=state_bytes(live.session).total,
        )

    @app.post("/sessions/{session_id}/step", response_model=schemas.StepResponse)
    def session_step(session_id: str, req: schemas.StepRequest):
        live = store.get(session_id)
        with live.lock:
            try:
                logits, _ = stream_step(live.params, live.session, req.token)
            except InputError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            return schemas.StepResponse(
                step=live.session.step,
                state_bytes_total=state_bytes(live.session).total,
                logits=[float(x) for x in logits],
            )

    @app.get("/sessions/{session_id}/state", response_model=schemas.SessionStateResponse)
    def session_state(session_id: str):
        live = store.get(session_id)
        with live.lock:
            report = state_bytes(live.session)
            return schemas.SessionStateResponse(
                session_id=live.session_id,
                step=live.session.step,
                per_layer=[
                    {"index": p.index, "kind": p.kind, "bytes": p.bytes}
                    for p in report.per_layer
                ],
                state_bytes_total=report.total,
                gdn_norms=live.session.gdn_norms(),
            )

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        store.remove(session_id)
        return {"deleted": session_id}

    return app


app = create_app()
