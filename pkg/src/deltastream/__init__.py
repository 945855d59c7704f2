"""Hybrid gated-delta-rule / sliding-window sequence engine.

Constant-state streaming inference with a full-attention baseline, the
matching distillation losses, and a benchmark harness that checks the
latency and memory laws the architecture is built around.
"""

__version__ = "0.1.0"
