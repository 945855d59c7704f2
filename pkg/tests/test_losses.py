import csv
import math

import numpy as np
import pytest

from deltastream.core import Rng, rms_norm, softmax_rows
from deltastream.errors import InputError, ShapeError
from deltastream.losses import (
    align_layer,
    align_stack,
    build_student_stack,
    build_teacher_stack,
    layerwise_mse,
    layerwise_mse_grad,
    logit_kl,
    logit_kl_grad,
    loss_grad_check,
    mixer_output,
    sft_ce,
    sft_ce_grad,
    write_alignment_csv,
)
from deltastream.model import ModelConfig, init_layer, layer_forward_sequence


def small_cfg():
    return ModelConfig.from_dict(dict(
        hidden=24,
        n_blocks=1,
        layers_per_block=4,
        hybrid_ratio=0.25,
        n_query_heads=2,
        n_kv_heads=2,
        head_dim=12,
        window=32,
        mlp_hidden=32,
        vocab=50,
        gdn={"n_heads": 2, "d_k": 6, "d_v": 8, "conv_width": 4, "chunk": 4},
    ))


# ---------------------------------------------------------------------------
# layerwise_mse
# ---------------------------------------------------------------------------


def test_mse_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(5, 7))
    assert layerwise_mse(x, x.copy()) == 0.0


def test_mse_all_ones_difference():
    teacher = np.zeros((6, 4))
    student = np.ones((6, 4))
    assert layerwise_mse(student, teacher) == pytest.approx(4.0, abs=1e-15)


def test_mse_matches_elementwise_oracle():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(9, 13))
    t = rng.normal(size=(9, 13))
    acc = 0.0
    for i in range(9):
        for j in range(13):
            acc += (s[i, j] - t[i, j]) ** 2
    assert abs(layerwise_mse(s, t) - acc / 9) <= 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        layerwise_mse(np.zeros((2, 3)), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_mse_invariant_under_joint_rotation(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(8, 16))
    t = rng.normal(size=(8, 16))
    rot, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    before = layerwise_mse(s, t)
    after = layerwise_mse(s @ rot, t @ rot)
    assert abs(before - after) <= 1e-9


# ---------------------------------------------------------------------------
# logit_kl
# ---------------------------------------------------------------------------


def test_kl_identical_logits_zero():
    z = np.random.default_rng(2).normal(size=(4, 9))
    assert logit_kl(z, z.copy()) <= 1e-15


def test_kl_one_hot_teacher_vs_uniform_student():
    teacher = np.array([[50.0, 0.0]])
    student = np.array([[0.0, 0.0]])
    assert abs(logit_kl(teacher, student) - math.log(2)) <= 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(3, 6)) * 3
    s = rng.normal(size=(3, 6)) * 3
    assert logit_kl(t, s) >= 0.0


def test_kl_identity_of_indiscernibles():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(2, 5))
    # equal distributions (shifted logits) -> zero KL
    assert logit_kl(t, t + 7.5) <= 1e-12
    # different distributions -> strictly positive
    s = t.copy()
    s[0, 0] += 0.3
    assert logit_kl(t, s) > 1e-6


# ---------------------------------------------------------------------------
# sft_ce
# ---------------------------------------------------------------------------


def test_ce_one_hot_is_negative_log_prob():
    student = np.array([[2.0, 1.0, -1.0]])
    targets = np.array([[1.0, 0.0, 0.0]])
    p = softmax_rows(student)[0, 0]
    assert abs(sft_ce(targets, student) + math.log(p)) <= 1e-12


def test_ce_uniform_student_is_log_vocab():
    vocab = 11
    student = np.zeros((3, vocab))
    targets = np.zeros((3, vocab))
    targets[:, 4] = 1.0
    assert abs(sft_ce(targets, student) - math.log(vocab)) <= 1e-12


@pytest.mark.parametrize("seed", range(100))
def test_ce_at_least_entropy(seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.01, 1.0, size=(2, 7))
    q /= q.sum(axis=1, keepdims=True)
    z = rng.normal(size=(2, 7))
    entropy = float(-np.mean(np.sum(q * np.log(q), axis=1)))
    assert sft_ce(q, z) >= entropy - 1e-12


def test_ce_cross_entropy_minus_entropy_is_kl():
    rng = np.random.default_rng(9)
    q = rng.uniform(0.01, 1.0, size=(4, 6))
    q /= q.sum(axis=1, keepdims=True)
    z = rng.normal(size=(4, 6))
    entropy = float(-np.mean(np.sum(q * np.log(q), axis=1)))
    p = softmax_rows(z)
    kl = float(np.mean(np.sum(q * (np.log(q) - np.log(p)), axis=1)))
    assert abs((sft_ce(q, z) - entropy) - kl) <= 1e-12
    assert kl >= 0.0


def test_ce_rejects_invalid_distributions():
    z = np.zeros((2, 3))
    with pytest.raises(InputError):
        sft_ce(np.array([[0.5, 0.6, 0.1], [1.0, 0.0, 0.0]]), z)
    with pytest.raises(InputError):
        sft_ce(np.array([[1.2, -0.2, 0.0], [1.0, 0.0, 0.0]]), z)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("loss_name,tol", [("mse", 1e-6), ("kl", 1e-6), ("ce", 1e-6)])
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(loss_name, tol, seed):
    assert loss_grad_check(loss_name, seed=seed) <= tol


def test_kl_gradient_zero_at_identical_logits():
    z = np.random.default_rng(4).normal(size=(3, 5))
    grad = logit_kl_grad(z, z.copy())
    assert np.max(np.abs(grad)) <= 1e-15


def test_ce_gradient_closed_form():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 6))
    q = np.zeros((4, 6))
    q[np.arange(4), rng.integers(0, 6, 4)] = 1.0
    grad = sft_ce_grad(q, z)
    closed = (softmax_rows(z) - q) / 4
    assert np.max(np.abs(grad - closed)) <= 1e-8


def test_mse_gradient_closed_form():
    rng = np.random.default_rng(6)
    s = rng.normal(size=(3, 4))
    t = rng.normal(size=(3, 4))
    assert np.max(np.abs(layerwise_mse_grad(s, t) - 2 * (s - t) / 3)) <= 1e-15


def test_loss_grad_check_rejects_unknown_loss():
    with pytest.raises(InputError):
        loss_grad_check("huber")


# ---------------------------------------------------------------------------
# Alignment harness
# ---------------------------------------------------------------------------


def test_align_identical_full_attention_layers_zero_loss():
    cfg = small_cfg()
    layer = init_layer(cfg, "full", Rng(0))
    x = np.random.default_rng(0).normal(size=(10, cfg.hidden))
    loss, record = align_layer(layer, layer, x, cfg)
    assert loss == 0.0
    assert record.teacher_out_norm == record.student_out_norm


def test_align_zero_student_loss_is_mean_squared_teacher_norm():
    cfg = small_cfg()
    teacher = init_layer(cfg, "full", Rng(1))
    student = init_layer(cfg, "gdn", Rng(2))
    for name in ("w_q", "w_k", "w_v", "conv_q", "conv_k", "conv_v",
                 "w_alpha", "w_beta", "w_gate", "w_out"):
        getattr(student.mixer, name)[:] = 0.0
    x = np.random.default_rng(3).normal(size=(12, cfg.hidden))
    loss, record = align_layer(teacher, student, x, cfg)
    t_out = mixer_output(teacher, x, cfg)
    assert abs(loss - float(np.mean(np.sum(t_out**2, axis=1)))) <= 1e-12
    assert record.student_out_norm == 0.0


def test_align_loss_invariant_to_permuting_token_order():
    cfg = small_cfg()
    teacher = init_layer(cfg, "full", Rng(4))
    student = init_layer(cfg, "gdn", Rng(5))
    x = np.random.default_rng(6).normal(size=(8, cfg.hidden))
    t_out = mixer_output(teacher, x, cfg)
    s_out = mixer_output(student, x, cfg)
    perm = np.random.default_rng(7).permutation(8)
    assert abs(layerwise_mse(s_out, t_out)
               - layerwise_mse(s_out[perm], t_out[perm])) <= 1e-12


def test_align_stack_shared_input_comes_from_teacher():
    """Student layer i must see the teacher's layer i-1 output, never its own."""
    cfg = small_cfg()
    teachers = build_teacher_stack(cfg, 3, seed=8)
    students = build_student_stack(cfg, 3, seed=9)
    x0 = np.random.default_rng(10).normal(size=(6, cfg.hidden))
    records = align_stack(teachers, students, x0, cfg)
    assert [r.input_source for r in records] == ["teacher"] * 3
    # recompute the protocol independently
    h = x0
    for i, (t_layer, s_layer) in enumerate(zip(teachers, students)):
        expected_loss = layerwise_mse(
            mixer_output(s_layer, h, cfg), mixer_output(t_layer, h, cfg)
        )
        assert records[i].loss == pytest.approx(expected_loss, rel=1e-12)
        h = layer_forward_sequence(t_layer, h, cfg)


def test_alignment_csv_schema(tmp_path):
    cfg = small_cfg()
    teachers = build_teacher_stack(cfg, 2, seed=11)
    students = build_student_stack(cfg, 2, seed=12)
    x0 = np.random.default_rng(13).normal(size=(4, cfg.hidden))
    records = align_stack(teachers, students, x0, cfg)
    path = tmp_path / "align.csv"
    write_alignment_csv(records, str(path))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["layer_index", "loss", "teacher_out_norm", "student_out_norm"]
    assert len(rows) == 3
    for i, row in enumerate(rows[1:]):
        assert int(row[0]) == i
        assert float(row[1]) == pytest.approx(records[i].loss, rel=1e-15)


def test_align_layer_rejects_hidden_mismatch():
    cfg = small_cfg()
    teacher = init_layer(cfg, "full", Rng(14))
    student = init_layer(cfg, "gdn", Rng(15))
    with pytest.raises(ShapeError):
        align_layer(teacher, student, np.zeros((4, cfg.hidden + 1)), cfg)
