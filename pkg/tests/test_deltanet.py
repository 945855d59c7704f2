import numpy as np
import pytest

from deltastream.core import Rng
from deltastream.deltanet import (
    DeltaState,
    GdnConfig,
    gdn_cell_forward,
    gdn_cell_forward_sequence,
    gdn_chunked,
    gdn_step,
    gdn_step_loop,
    init_gdn_cell,
    linear_attn_step,
    reflector_apply,
)
from deltastream.errors import ConfigError, ShapeError


def _rand_stream(seed, n_heads=3, length=64, d_k=8, d_v=12, unit_keys=True):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n_heads, length, d_k))
    k = rng.normal(size=(n_heads, length, d_k))
    if unit_keys:
        k /= np.linalg.norm(k, axis=-1, keepdims=True)
    v = rng.normal(size=(n_heads, length, d_v))
    alpha = rng.uniform(0.5, 1.0, size=(n_heads, length))
    beta = rng.uniform(0.0, 1.0, size=(n_heads, length))
    s0 = rng.normal(size=(n_heads, d_v, d_k))
    return q, k, v, alpha, beta, s0


# ---------------------------------------------------------------------------
# linear_attn_step
# ---------------------------------------------------------------------------


def test_linear_attn_single_write_read():
    e1 = np.zeros((1, 4)); e1[0, 0] = 1.0
    e2 = np.zeros((1, 4)); e2[0, 1] = 1.0
    o, s = linear_attn_step(e1, e1, e2, np.zeros((1, 4, 4)))
    assert np.array_equal(o, e2)
    assert np.array_equal(s, np.outer(e2[0], e1[0])[None])


def test_linear_attn_orthogonal_query_reads_zero():
    rng = np.random.default_rng(0)
    s = np.zeros((1, 4, 4))
    for j in range(2):
        k = np.zeros((1, 4)); k[0, j] = 1.0
        _, s = linear_attn_step(k, k, rng.normal(size=(1, 4)), s)
    q = np.zeros((1, 4)); q[0, 3] = 1.0  # never written
    o, _ = linear_attn_step(np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)), s)
    o = np.einsum("hvk,hk->hv", s, q)
    assert np.max(np.abs(o)) == 0.0


def test_linear_attn_matches_kernel_sum_oracle():
    rng = np.random.default_rng(1)
    length, d_k, d_v = 64, 6, 5
    q = rng.normal(size=(length, d_k))
    k = rng.normal(size=(length, d_k))
    v = rng.normal(size=(length, d_v))
    s = np.zeros((1, d_v, d_k))
    for t in range(length):
        o, s = linear_attn_step(q[t][None], k[t][None], v[t][None], s)
        expected = np.zeros(d_v)
        for i in range(t + 1):
            expected += np.dot(q[t], k[i]) * v[i]
        assert np.max(np.abs(o[0] - expected)) <= 1e-10


# ---------------------------------------------------------------------------
# gdn_step
# ---------------------------------------------------------------------------


def test_gdn_step_identity_update():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(2, 4, 3))
    k = rng.normal(size=(2, 3))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    _, s_next = gdn_step(
        rng.normal(size=(2, 3)), k, rng.normal(size=(2, 4)),
        np.ones(2), np.zeros(2), s,
    )
    assert np.array_equal(s_next, s)


def test_gdn_step_first_write_unit_key_retrieval():
    rng = np.random.default_rng(3)
    k = rng.normal(size=(1, 5))
    k /= np.linalg.norm(k)
    v = rng.normal(size=(1, 6))
    o, s_next = gdn_step(k, k, v, np.ones(1), np.ones(1), np.zeros((1, 6, 5)))
    assert np.max(np.abs(s_next - np.outer(v[0], k[0])[None])) <= 1e-15
    assert np.max(np.abs(o - v)) <= 1e-12


def _dense_eq2_oracle(s, k, v, alpha, beta):
    """Explicit matrices: S(alpha(I - beta k k^T)) + beta v k^T, per head."""
    n_heads, d_v, d_k = s.shape
    out = np.empty_like(s)
    for h in range(n_heads):
        reflector = np.eye(d_k) - beta[h] * np.outer(k[h], k[h])
        out[h] = s[h] @ (alpha[h] * reflector) + beta[h] * np.outer(v[h], k[h])
    return out


@pytest.mark.parametrize("seed", range(8))
def test_gdn_step_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    n_heads, d_k, d_v = 2, 6, 5
    s = rng.normal(size=(n_heads, d_v, d_k))
    k = rng.normal(size=(n_heads, d_k))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    v = rng.normal(size=(n_heads, d_v))
    q = rng.normal(size=(n_heads, d_k))
    alpha = rng.uniform(0.0, 1.0, n_heads)
    beta = rng.uniform(0.0, 1.0, n_heads)
    o, s_next = gdn_step(q, k, v, alpha, beta, s)
    want = _dense_eq2_oracle(s, k, v, alpha, beta)
    assert np.max(np.abs(s_next - want)) <= 1e-12
    want_o = np.stack([want[h] @ q[h] for h in range(n_heads)])
    assert np.max(np.abs(o - want_o)) <= 1e-12


def test_delta_rule_retrieval_orthonormal_keys():
    rng = np.random.default_rng(5)
    d_k, d_v = 8, 6
    keys, _ = np.linalg.qr(rng.normal(size=(d_k, d_k)))
    values = rng.normal(size=(4, d_v))
    s = np.zeros((1, d_v, d_k))
    ones = np.ones(1)
    for j in range(4):
        _, s = gdn_step(keys[:, j][None], keys[:, j][None], values[j][None],
                        ones, ones, s)
    for j in range(4):
        got = s[0] @ keys[:, j]
        assert np.max(np.abs(got - values[j])) <= 1e-12


def test_gdn_step_shape_errors():
    with pytest.raises(ShapeError):
        gdn_step(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)),
                 np.ones(2), np.ones(2), np.zeros((2, 3, 3)))


# ---------------------------------------------------------------------------
# Reflector norm property
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_reflector_never_expands_frobenius_norm(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(7, 5))
    k = rng.normal(size=5)
    k /= np.linalg.norm(k)
    beta = rng.uniform(0.0, 1.0)
    out = reflector_apply(m, k, beta)
    assert np.linalg.norm(out) <= np.linalg.norm(m) + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_per_step_norm_recurrence_bound(seed):
    q, k, v, alpha, beta, s0 = _rand_stream(seed, length=48)
    s = s0
    for t in range(48):
        _, s_next = gdn_step(q[:, t], k[:, t], v[:, t], alpha[:, t], beta[:, t], s)
        for h in range(s.shape[0]):
            bound = (alpha[h, t] * np.linalg.norm(s[h])
                     + beta[h, t] * np.linalg.norm(v[h, t]))
            assert np.linalg.norm(s_next[h]) <= bound + 1e-9
        s = s_next


def test_state_norm_stays_bounded_under_decay_cap():
    """With sup alpha < 1, ||S_t|| <= max(||S_0||, v_max / (1 - sup alpha))."""
    rng = np.random.default_rng(77)
    n_heads, d_k, d_v, length = 2, 6, 5, 512
    alpha_cap = 0.95
    k = rng.normal(size=(n_heads, length, d_k))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    v = rng.normal(size=(n_heads, length, d_v))
    v_max = float(np.max(np.linalg.norm(v, axis=-1)))
    alpha = rng.uniform(0.5, alpha_cap, size=(n_heads, length))
    beta = rng.uniform(0.0, 1.0, size=(n_heads, length))
    s = np.zeros((n_heads, d_v, d_k))
    limit = v_max / (1.0 - alpha_cap)
    for t in range(length):
        _, s = gdn_step(np.zeros((n_heads, d_k)), k[:, t], v[:, t],
                        alpha[:, t], beta[:, t], s)
        for h in range(n_heads):
            assert np.linalg.norm(s[h]) <= limit + 1e-9


# ---------------------------------------------------------------------------
# Chunked form
# ---------------------------------------------------------------------------


def test_chunk_size_one_is_bitwise_identical_to_step_loop():
    q, k, v, alpha, beta, s0 = _rand_stream(20, length=40)
    o_ref, s_ref = gdn_step_loop(q, k, v, alpha, beta, s0)
    o_c, s_c = gdn_chunked(q, k, v, alpha, beta, s0, chunk=1)
    assert np.array_equal(o_c, o_ref)
    assert np.array_equal(s_c, s_ref)


@pytest.mark.parametrize("chunk", [2, 7, 64, 256])
def test_chunked_matches_step_loop(chunk):
    q, k, v, alpha, beta, s0 = _rand_stream(21, length=256)
    o_ref, s_ref = gdn_step_loop(q, k, v, alpha, beta, s0)
    o_c, s_c = gdn_chunked(q, k, v, alpha, beta, s0, chunk=chunk)
    assert np.max(np.abs(o_c - o_ref)) <= 1e-10
    assert np.max(np.abs(s_c - s_ref)) <= 1e-10


def test_chunked_single_block_matches():
    q, k, v, alpha, beta, s0 = _rand_stream(22, length=33)
    o_ref, s_ref = gdn_step_loop(q, k, v, alpha, beta, s0)
    o_c, s_c = gdn_chunked(q, k, v, alpha, beta, s0, chunk=33)
    assert np.max(np.abs(o_c - o_ref)) <= 1e-10
    assert np.max(np.abs(s_c - s_ref)) <= 1e-10


def test_chunked_rejects_bad_chunk():
    q, k, v, alpha, beta, s0 = _rand_stream(23, length=8)
    with pytest.raises(ConfigError):
        gdn_chunked(q, k, v, alpha, beta, s0, chunk=0)


# ---------------------------------------------------------------------------
# Full cell
# ---------------------------------------------------------------------------

CELL_CFG = GdnConfig(n_heads=2, d_k=8, d_v=12, conv_width=4, chunk=16)


def test_zero_params_zero_state_zero_input_gives_zero_output():
    params = init_gdn_cell(CELL_CFG, hidden=16, rng=Rng(0))
    for name in ("w_q", "w_k", "w_v", "conv_q", "conv_k", "conv_v",
                 "w_alpha", "w_beta", "w_gate", "w_out"):
        getattr(params, name)[:] = 0.0
    state = DeltaState.zeros(CELL_CFG)
    y, _ = gdn_cell_forward(np.zeros(16), params, state)
    assert np.array_equal(y, np.zeros(16))


@pytest.mark.parametrize("seed", range(3))
def test_cell_stepwise_matches_sequence(seed):
    params = init_gdn_cell(CELL_CFG, hidden=16, rng=Rng(seed))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 16))
    y_seq, state_seq = gdn_cell_forward_sequence(x, params, DeltaState.zeros(CELL_CFG))
    state = DeltaState.zeros(CELL_CFG)
    for t in range(40):
        y_t, state = gdn_cell_forward(x[t], params, state)
        assert np.max(np.abs(y_t - y_seq[t])) <= 1e-10
    assert np.max(np.abs(state.s - state_seq.s)) <= 1e-10
    assert np.max(np.abs(state.conv_q_tail - state_seq.conv_q_tail)) <= 1e-12


def test_cell_telemetry_reports_gates_in_range():
    params = init_gdn_cell(CELL_CFG, hidden=16, rng=Rng(9))
    state = DeltaState.zeros(CELL_CFG)
    telem = {}
    rng = np.random.default_rng(9)
    _, state = gdn_cell_forward(rng.normal(size=16), params, state, telem)
    assert np.all(telem["alpha"] > 0) and np.all(telem["alpha"] <= 1)
    assert np.all(telem["beta"] >= 0) and np.all(telem["beta"] <= 1)
    assert telem["head_norms"].shape == (2,)


def test_beta_override_freezes_state():
    params = init_gdn_cell(CELL_CFG, hidden=16, rng=Rng(4))
    params.beta_override = 0.0
    state = DeltaState.zeros(CELL_CFG)
    rng = np.random.default_rng(4)
    y, state = gdn_cell_forward(rng.normal(size=16), params, state)
    assert np.array_equal(state.s, np.zeros_like(state.s))
    assert np.array_equal(y, np.zeros(16))  # zero state reads zero


def test_paper_preset_state_shape():
    cfg = GdnConfig(n_heads=16, d_k=128, d_v=256)
    state = DeltaState.zeros(cfg)
    # stored value-major; the audited shape is (heads, d_k, d_v)
    assert state.s.shape == (16, 256, 128)
    assert state.s.size == 16 * 128 * 256


def test_delta_state_bytes_constant_in_tokens_processed():
    params = init_gdn_cell(CELL_CFG, hidden=16, rng=Rng(5))
    state = DeltaState.zeros(CELL_CFG)
    first = state.state_bytes()
    rng = np.random.default_rng(5)
    for _ in range(50):
        _, state = gdn_cell_forward(rng.normal(size=16), params, state)
    assert state.state_bytes() == first
    assert state.s.shape == (CELL_CFG.n_heads, CELL_CFG.d_v, CELL_CFG.d_k)


def test_gdn_config_validation():
    with pytest.raises(ConfigError):
        GdnConfig(n_heads=0, d_k=4, d_v=4)
    with pytest.raises(ConfigError):
        GdnConfig(n_heads=2, d_k=4, d_v=4, conv_width=3)
    with pytest.raises(ConfigError):
        GdnConfig(n_heads=2, d_k=4, d_v=4, chunk=0)
