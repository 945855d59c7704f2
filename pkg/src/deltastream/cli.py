"""Command-line client for the deltastream service.

Every subcommand talks HTTP to the service layer: against a remote instance
when ``--server`` is given, otherwise against an in-process copy of the app
(no network, same code path). Benchmark loops always run on the service
side, so transport cost never pollutes per-token timings.
"""

from __future__ import annotations

import asyncio
import json
import sys

import click
import httpx

from .bench import (
    BenchRecord,
    FrameRecord,
    write_bench_csv,
    write_frame_csv,
)


class ServiceClient:
    """POSTs to a remote service, or to an in-process app when no server
    is configured (same routes, no network)."""

    def __init__(self, server: str | None):
        self._server = server
        if server is None:
            from .service.app import create_app

            self._transport = httpx.ASGITransport(app=create_app())

    def post(self, path: str, payload: dict) -> dict:
        if self._server:
            with httpx.Client(base_url=self._server, timeout=600.0) as client:
                resp = client.post(path, json=payload)
        else:
            resp = asyncio.run(self._post_asgi(path, payload))
        if resp.status_code >= 400:
            raise click.ClickException(f"{path}: {resp.status_code} {resp.text}")
        return resp.json()

    async def _post_asgi(self, path: str, payload: dict) -> httpx.Response:
        async with httpx.AsyncClient(
            transport=self._transport, base_url="http://deltastream.local",
            timeout=600.0,
        ) as client:
            return await client.post(path, json=payload)


def _config_payload(preset: str | None, config_path: str | None, baseline: bool) -> dict:
    if preset and config_path:
        raise click.UsageError("use either --preset or --config, not both")
    payload: dict = {"baseline": baseline}
    if config_path:
        with open(config_path) as f:
            payload["config"] = json.load(f)
    else:
        payload["preset"] = preset or "micro"
    return payload


def _echo_json(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("--server", default=None, envvar="DELTASTREAM_SERVER",
              help="Base URL of a running service; defaults to in-process.")
@click.pass_context
def main(ctx, server):
    """Benchmark and inspect the hybrid streaming engine."""
    ctx.obj = {"server": server}


def _client(ctx) -> ServiceClient:
    return ServiceClient(ctx.obj["server"])


common_config_options = [
    click.option("--preset", default=None, help="Shipped preset name (micro, paper-shape)."),
    click.option("--config", "config_path", default=None, type=click.Path(exists=True),
                 help="Path to a JSON config document."),
    click.option("--baseline", is_flag=True, help="Force full-attention baseline mode."),
    click.option("--seed", default=0, show_default=True, type=int),
]


def with_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@main.group()
def bench():
    """Latency and throughput benchmarks."""


@bench.command("tokens")
@with_options(common_config_options)
@click.option("--steps", default=1024, show_default=True, type=int)
@click.option("--warmup", default=64, show_default=True, type=int)
@click.option("--repeats", default=1, show_default=True, type=int)
@click.option("--out", default=None, type=click.Path(), help="Write per-step CSV here.")
@click.pass_context
def bench_tokens(ctx, preset, config_path, baseline, seed, steps, warmup, repeats, out):
    """Token-by-token decode benchmark on one streaming session."""
    payload = _config_payload(preset, config_path, baseline)
    payload.update({"steps": steps, "warmup_steps": warmup,
                    "repeats": repeats, "seed": seed})
    data = _client(ctx).post("/bench/tokens", payload)
    if out:
        records = [
            BenchRecord(r["step"], r["latency_ns"], r["state_bytes"],
                        tuple(r["cache_norms"]))
            for r in data["records"]
        ]
        write_bench_csv(records, out)
        click.echo(f"wrote {len(records)} rows to {out}", err=True)
    _echo_json(data["summary"])


@bench.command("frames")
@with_options(common_config_options)
@click.option("--frames", default=100, show_default=True, type=int)
@click.option("--tokens-per-frame", default=274, show_default=True, type=int)
@click.option("--warmup", default=16, show_default=True, type=int)
@click.option("--repeats", default=1, show_default=True, type=int)
@click.option("--out", default=None, type=click.Path(), help="Write per-frame CSV here.")
@click.pass_context
def bench_frames(ctx, preset, config_path, baseline, seed, frames,
                 tokens_per_frame, warmup, repeats, out):
    """Frame-stream benchmark: the session is retained across frames."""
    payload = _config_payload(preset, config_path, baseline)
    payload.update({"frames": frames, "tokens_per_frame": tokens_per_frame,
                    "warmup_steps": warmup, "repeats": repeats, "seed": seed})
    data = _client(ctx).post("/bench/frames", payload)
    if out:
        records = [
            FrameRecord(r["frame"], r["latency_ns"], r["fps"], r["state_bytes"],
                        tuple(r["cache_norms"]))
            for r in data["records"]
        ]
        write_frame_csv(records, out)
        click.echo(f"wrote {len(records)} rows to {out}", err=True)
    _echo_json(data["summary"])


@main.group()
def trace():
    """Telemetry traces."""


@trace.command("norms")
@with_options(common_config_options)
@click.option("--steps", default=512, show_default=True, type=int)
@click.option("--out", default=None, type=click.Path(), help="Write per-step CSV here.")
@click.pass_context
def trace_norms(ctx, preset, config_path, baseline, seed, steps, out):
    """Frobenius norm of every delta-rule memory after each step."""
    payload = _config_payload(preset, config_path, baseline)
    payload.update({"steps": steps, "seed": seed})
    data = _client(ctx).post("/trace/norms", payload)
    if out:
        records = [
            BenchRecord(r["step"], r["latency_ns"], r["state_bytes"],
                        tuple(r["cache_norms"]))
            for r in data["records"]
        ]
        write_bench_csv(records, out)
        click.echo(f"wrote {len(records)} rows to {out}", err=True)
    last = data["records"][-1] if data["records"] else None
    _echo_json({
        "steps": len(data["records"]),
        "gdn_layer_indices": data["gdn_layer_indices"],
        "final_norms": last["cache_norms"] if last else [],
    })


@main.command()
@click.option("--suite", default="all", show_default=True,
              type=click.Choice(["equivalence", "gradients", "invariants", "all"]))
@click.pass_context
def verify(ctx, suite):
    """Run the cross-module oracle suites; nonzero exit on any failure."""
    data = _client(ctx).post("/verify", {"suite": suite})
    _echo_json(data)
    if not data["passed"]:
        sys.exit(1)


@main.command()
@with_options(common_config_options[:3])
@click.option("--seq-len", default=1, show_default=True, type=int)
@click.pass_context
def shapes(ctx, preset, config_path, baseline, seq_len):
    """Shape-only dry run of a configuration (no weight allocation)."""
    payload = _config_payload(preset, config_path, baseline)
    payload["seq_len"] = seq_len
    _echo_json(_client(ctx).post("/shapes", payload))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("deltastream.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
