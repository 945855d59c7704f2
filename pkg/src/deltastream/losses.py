"""Distillation and fine-tuning objectives, with analytic gradients and a
same-input layer-alignment harness.

The harness feeds one shared input to a frozen full-attention teacher layer
and a delta-rule student layer and measures the MSE between the two mixer
sublayer outputs; when iterating a stack, the next shared input is always
the teacher's previous-layer output, never the student's, so alignment
errors cannot cascade.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import Rng, log_softmax_rows, rms_norm, softmax_rows
from .errors import InputError, ShapeError
from .model import (
    LayerParams,
    ModelConfig,
    attention_mixer_sequence,
    gdn_mixer_sequence,
    init_layer,
    layer_forward_sequence,
)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def layerwise_mse(student: np.ndarray, teacher: np.ndarray) -> float:
    """Squared L2 difference, summed over hidden, averaged over tokens."""
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    _check_same_shape(student, teacher, "layerwise_mse")
    diff = student - teacher
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def layerwise_mse_grad(student: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    """d layerwise_mse / d student."""
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    _check_same_shape(student, teacher, "layerwise_mse")
    return 2.0 * (student - teacher) / student.shape[0]


def logit_kl(teacher: np.ndarray, student: np.ndarray) -> float:
    """Mean token-level KL(softmax(teacher) || softmax(student))."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    _check_same_shape(teacher, student, "logit_kl")
    p = softmax_rows(teacher)
    log_p = log_softmax_rows(teacher)
    log_q = log_softmax_rows(student)
    return float(np.mean(np.sum(p * (log_p - log_q), axis=-1)))


def logit_kl_grad(teacher: np.ndarray, student: np.ndarray) -> np.ndarray:
    """d logit_kl / d student logits."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    _check_same_shape(teacher, student, "logit_kl")
    return (softmax_rows(student) - softmax_rows(teacher)) / student.shape[0]


def _check_distributions(targets: np.ndarray) -> None:
    if np.any(targets < 0):
        raise InputError("target distributions must be nonnegative")
    sums = targets.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-8):
        raise InputError("target distributions must sum to 1")


def sft_ce(targets: np.ndarray, student: np.ndarray) -> float:
    """Mean token-level cross entropy between targets and softmax(student)."""
    targets = np.asarray(targets, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    _check_same_shape(targets, student, "sft_ce")
    _check_distributions(targets)
    log_q = log_softmax_rows(student)
    return float(-np.mean(np.sum(targets * log_q, axis=-1)))


def sft_ce_grad(targets: np.ndarray, student: np.ndarray) -> np.ndarray:
    """d sft_ce / d student logits (softmax(student) - targets, per token)."""
    targets = np.asarray(targets, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    _check_same_shape(targets, student, "sft_ce")
    _check_distributions(targets)
    return (softmax_rows(student) - targets) / student.shape[0]


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

FD_STEP = 1e-5


def _central_fd(fn, x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + FD_STEP
        hi = fn(x)
        x[idx] = orig - FD_STEP
        lo = fn(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * FD_STEP)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def loss_grad_check(loss_name: str, seed: int = 0, rows: int = 3, cols: int = 4) -> float:
    """Compare one loss's analytic input-gradient against central finite
    differences on a random instance; returns the max relative error."""
    rng = Rng(seed)
    student = rng.normal((rows, cols))
    if loss_name == "mse":
        teacher = rng.normal((rows, cols))
        analytic = layerwise_mse_grad(student, teacher)
        numeric = _central_fd(lambda s: layerwise_mse(s, teacher), student)
    elif loss_name == "kl":
        teacher = rng.normal((rows, cols))
        analytic = logit_kl_grad(teacher, student)
        numeric = _central_fd(lambda s: logit_kl(teacher, s), student)
    elif loss_name == "ce":
        targets = np.zeros((rows, cols))
        targets[np.arange(rows), rng.integers(cols, size=rows)] = 1.0
        analytic = sft_ce_grad(targets, student)
        numeric = _central_fd(lambda s: sft_ce(targets, s), student)
    else:
        raise InputError(f"unknown loss {loss_name!r}; expected mse/kl/ce")
    return max_relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# Same-input layer alignment
# ---------------------------------------------------------------------------


@dataclass
class AlignRecord:
    layer_index: int
    loss: float
    teacher_out_norm: float
    student_out_norm: float
    input_source: str  # always "teacher": shared-input protocol marker


def mixer_output(layer: LayerParams, x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Mixer sublayer output for a shared input (pre-norm, no residual)."""
    h = rms_norm(x, layer.norm1)
    if layer.kind == "gdn":
        out, _ = gdn_mixer_sequence(layer.mixer, h)
        return out
    window = cfg.window if layer.kind == "swa" else None
    return attention_mixer_sequence(layer.mixer, h, cfg, window)


def build_teacher_stack(cfg: ModelConfig, n_layers: int, seed: int) -> list[LayerParams]:
    """Frozen random full-attention layers standing in for a real teacher."""
    rng = Rng(seed)
    return [init_layer(cfg, "full", rng) for _ in range(n_layers)]


def build_student_stack(cfg: ModelConfig, n_layers: int, seed: int) -> list[LayerParams]:
    rng = Rng(seed)
    return [init_layer(cfg, "gdn", rng) for _ in range(n_layers)]


def align_layer(
    teacher_layer: LayerParams,
    student_layer: LayerParams,
    shared_input: np.ndarray,
    cfg: ModelConfig,
    layer_index: int = 0,
) -> tuple[float, AlignRecord]:
    """Feed the identical input to both mixers and score the output match."""
    shared_input = np.asarray(shared_input, dtype=np.float64)
    if shared_input.shape[1] != cfg.hidden:
        raise ShapeError(
            f"shared input width {shared_input.shape[1]} != hidden {cfg.hidden}"
        )
    t_out = mixer_output(teacher_layer, shared_input, cfg)
    s_out = mixer_output(student_layer, shared_input, cfg)
    loss = layerwise_mse(s_out, t_out)
    record = AlignRecord(
        layer_index=layer_index,
        loss=loss,
        teacher_out_norm=float(np.linalg.norm(t_out)),
        student_out_norm=float(np.linalg.norm(s_out)),
        input_source="teacher",
    )
    return loss, record


def align_stack(
    teacher_layers: list[LayerParams],
    student_layers: list[LayerParams],
    first_input: np.ndarray,
    cfg: ModelConfig,
) -> list[AlignRecord]:
    """Align layer i of both stacks on the teacher's layer i-1 output.

    The running hidden state is advanced only through teacher layers, so
    every student sees exactly what the matching teacher layer saw.
    """
    if len(teacher_layers) != len(student_layers):
        raise ShapeError("teacher and student stacks must have equal depth")
    records = []
    h = np.asarray(first_input, dtype=np.float64)
    for i, (t_layer, s_layer) in enumerate(zip(teacher_layers, student_layers)):
        _, record = align_layer(t_layer, s_layer, h, cfg, layer_index=i)
        records.append(record)
        h = layer_forward_sequence(t_layer, h, cfg)
    return records


ALIGN_CSV_COLUMNS = ["layer_index", "loss", "teacher_out_norm", "student_out_norm"]


def write_alignment_csv(records: list[AlignRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ALIGN_CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.layer_index, repr(r.loss), repr(r.teacher_out_norm),
                 repr(r.student_out_norm)]
            )
