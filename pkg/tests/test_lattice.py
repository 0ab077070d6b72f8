import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnntkit import numgrad as ng
from rnntkit.lattice import (CtcLengthError, ctc_loss, ctc_min_frames,
                             emission_occupancy, extract_time_indices,
                             gather_rnnt_sampling_matrix, lattice_report,
                             rnnt_forward_backward, rnnt_loss, rnnt_loss_grad,
                             viterbi_time_indices)
from rnntkit.models import JointTensor, TokenSequence
from rnntkit.numgrad import Array, ContractError, Tape, backward

import oracles
from conftest import random_joint_tensor, random_tokens
from oracles import central_difference, grad_close

BLANK = 0


def uniform_joint(t_len, u_len, k):
    lp = np.full((t_len, u_len + 1, k), -math.log(k))
    return JointTensor(Array(lp), 1.0)


def test_single_blank_path():
    j = uniform_joint(1, 0, 3)
    v = rnnt_forward_backward(j, TokenSequence([]), BLANK)
    assert abs(-v.log_likelihood - math.log(3)) < 1e-12


def test_single_emit_then_blank_path():
    rng = np.random.default_rng(5)
    j = random_joint_tensor(rng, 1, 1, 4)
    y = TokenSequence([2])
    v = rnnt_forward_backward(j, y, BLANK)
    lp = j.log_probs.data
    expected = lp[0, 0, 2] + lp[0, 1, BLANK]
    assert abs(v.log_likelihood - expected) < 1e-12


def test_column_count_contract():
    j = uniform_joint(2, 1, 3)
    with pytest.raises(ContractError):
        rnnt_forward_backward(j, TokenSequence([1, 2]), BLANK)


def test_loss_matches_path_enumeration_3x2x4():
    rng = np.random.default_rng(12)
    j = random_joint_tensor(rng, 3, 2, 4)
    y = random_tokens(rng, 2, 4)
    v = rnnt_forward_backward(j, y, BLANK)
    want = oracles.rnnt_log_likelihood(j.log_probs.data, list(y.ids), BLANK)
    assert abs(v.log_likelihood - want) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(2, 4), st.integers(0, 10_000))
def test_forward_backward_agree_with_enumeration(t_len, u_len, k, seed):
    rng = np.random.default_rng(seed)
    j = random_joint_tensor(rng, t_len, u_len, k)
    y = random_tokens(rng, u_len, k)
    v = rnnt_forward_backward(j, y, BLANK)
    want = oracles.rnnt_log_likelihood(j.log_probs.data, list(y.ids), BLANK)
    assert abs(v.log_likelihood - want) < 1e-10
    # alpha and beta tell the same story
    assert abs(v.log_beta[0, 0] - v.log_likelihood) < 1e-10


def test_alpha_beta_node_bound_and_antidiagonal_cut():
    rng = np.random.default_rng(3)
    j = random_joint_tensor(rng, 4, 3, 4)
    y = random_tokens(rng, 3, 4)
    v = rnnt_forward_backward(j, y, BLANK)
    t_len, u_cols = v.log_alpha.shape
    assert v.log_alpha[0, 0] == 0.0
    assert np.all(v.log_alpha + v.log_beta <= v.log_likelihood + 1e-8)
    for n in range(t_len + u_cols - 1):
        terms = [v.log_alpha[t, n - t] + v.log_beta[t, n - t]
                 for t in range(t_len) if 0 <= n - t < u_cols]
        lse = np.logaddexp.reduce(terms)
        assert abs(lse - v.log_likelihood) < 1e-8


def test_shift_invariance_of_logits():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 3, 4))
    y = random_tokens(rng, 2, 4)
    j1 = JointTensor(ng.log_softmax(Array(logits)), 1.0)
    shifted = logits.copy()
    shifted[1, 2, :] += 7.5  # constant shift at one node
    j2 = JointTensor(ng.log_softmax(Array(shifted)), 1.0)
    v1 = rnnt_forward_backward(j1, y, BLANK)
    v2 = rnnt_forward_backward(j2, y, BLANK)
    assert abs(v1.log_likelihood - v2.log_likelihood) < 1e-10


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_grad_sums_to_zero_over_classes():
    rng = np.random.default_rng(21)
    j = random_joint_tensor(rng, 3, 2, 4)
    y = random_tokens(rng, 2, 4)
    grad = rnnt_loss_grad(j, y, BLANK)
    assert np.allclose(grad.sum(axis=2), 0.0, atol=1e-12)


def test_grad_single_node_case():
    rng = np.random.default_rng(22)
    j = random_joint_tensor(rng, 1, 0, 5)
    grad = rnnt_loss_grad(j, TokenSequence([]), BLANK)
    probs = np.exp(j.log_probs.data[0, 0])
    onehot = np.zeros(5)
    onehot[BLANK] = 1.0
    assert np.allclose(grad[0, 0], probs - onehot, atol=1e-12)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(23)
    logits = rng.normal(size=(3, 3, 4))
    y = random_tokens(rng, 2, 4)

    def loss_of(current):
        j = JointTensor(ng.log_softmax(Array(current)), 1.0)
        return -rnnt_forward_backward(j, y, BLANK).log_likelihood

    j = JointTensor(ng.log_softmax(Array(logits)), 1.0)
    analytic = rnnt_loss_grad(j, y, BLANK)
    numeric = central_difference(lambda: loss_of(logits), logits)
    assert grad_close(analytic, numeric)


def test_taped_rnnt_loss_matches_closed_form():
    rng = np.random.default_rng(24)
    logits_data = rng.normal(size=(4, 3, 4))
    y = random_tokens(rng, 2, 4)
    tape = Tape()
    logits = Array(logits_data, tape)
    j = JointTensor(ng.log_softmax(logits), 1.0)
    loss, v = rnnt_loss(j, y, BLANK)
    grads = backward(loss, tape)
    closed = rnnt_loss_grad(j, y, BLANK, v)
    assert np.allclose(grads[logits], closed, atol=1e-12)


# ---------------------------------------------------------------------------
# occupancy and time indices
# ---------------------------------------------------------------------------


def test_occupancy_columns_sum_to_one():
    rng = np.random.default_rng(31)
    j = random_joint_tensor(rng, 4, 3, 4)
    y = random_tokens(rng, 3, 4)
    v = rnnt_forward_backward(j, y, BLANK)
    gamma = emission_occupancy(v, j, y, BLANK)
    assert np.allclose(gamma.sum(axis=0), 1.0, atol=1e-8)


def test_occupancy_forced_alignment_at_t1():
    rng = np.random.default_rng(32)
    j = random_joint_tensor(rng, 1, 3, 4)
    y = random_tokens(rng, 3, 4)
    v = rnnt_forward_backward(j, y, BLANK)
    gamma = emission_occupancy(v, j, y, BLANK)
    assert np.allclose(gamma, 1.0, atol=1e-12)


def test_occupancy_matches_path_enumeration():
    rng = np.random.default_rng(33)
    j = random_joint_tensor(rng, 3, 2, 4)
    y = random_tokens(rng, 2, 4)
    v = rnnt_forward_backward(j, y, BLANK)
    gamma = emission_occupancy(v, j, y, BLANK)
    want = oracles.rnnt_emission_posterior(j.log_probs.data, list(y.ids), BLANK)
    assert np.allclose(gamma, want, atol=1e-10)


def test_extract_time_indices_rules():
    assert extract_time_indices(np.array([[0.8], [0.2]])).t_u == (0,)
    uniform = np.full((3, 4), 0.25)
    assert extract_time_indices(uniform).t_u == (0, 0, 0, 0)
    rng = np.random.default_rng(34)
    gamma = rng.uniform(size=(4, 3))
    got = extract_time_indices(gamma)
    prev = 0
    for u in range(3):
        raw = int(np.argmax(gamma[:, u]))
        prev = max(prev, raw)
        assert got.t_u[u] == prev
    assert extract_time_indices(gamma).t_u == got.t_u  # stable


def test_time_indices_monotone_after_clamp():
    gamma = np.array([[0.1, 0.9, 0.2],
                      [0.2, 0.05, 0.3],
                      [0.7, 0.05, 0.5]])
    idx = extract_time_indices(gamma)
    assert idx.t_u == (2, 2, 2)  # raw argmaxes (2, 0, 2) invert and get clamped


def test_gather_matrix_t1_equals_time_slice():
    rng = np.random.default_rng(35)
    j = random_joint_tensor(rng, 1, 3, 4)
    idx = extract_time_indices(np.ones((1, 3)))
    got = gather_rnnt_sampling_matrix(j, idx)
    assert got.source == "rnnt"
    assert np.array_equal(got.log_probs, j.log_probs.data[0, :3])


def test_gather_matrix_shape_and_range_check():
    rng = np.random.default_rng(36)
    j = random_joint_tensor(rng, 2, 2, 4)
    from rnntkit.lattice import AlignmentIndices
    got = gather_rnnt_sampling_matrix(j, AlignmentIndices((0, 1)))
    assert got.log_probs.shape == (2, 4)
    with pytest.raises(ContractError):
        gather_rnnt_sampling_matrix(j, AlignmentIndices((0, 5)))
    with pytest.raises(ContractError):
        gather_rnnt_sampling_matrix(j, AlignmentIndices((0,)))


def test_gather_matrix_on_peaked_lattice_follows_dominant_path():
    # construct distributions where the path emit@t: y1 at t=0, y2 at t=2 dominates
    t_len, u_len, k = 3, 2, 4
    lp = np.full((t_len, u_len + 1, k), math.log(0.01))
    y = TokenSequence([1, 2])

    def peak(t, u, cls):
        lp[t, u] = math.log(0.01 / (k - 1))
        lp[t, u, cls] = math.log(0.99)

    peak(0, 0, 1)      # emit y1 at t=0
    peak(0, 1, BLANK)  # advance
    peak(1, 1, BLANK)  # advance
    peak(2, 1, 2)      # emit y2 at t=2
    peak(2, 2, BLANK)  # exit
    j = JointTensor(Array(lp - np.log(np.exp(lp).sum(-1, keepdims=True))), 1.0)
    v = rnnt_forward_backward(j, y, BLANK)
    gamma = emission_occupancy(v, j, y, BLANK)
    idx = extract_time_indices(gamma)
    assert idx.t_u == (0, 2)
    assert idx.t_u == viterbi_time_indices(j, y, BLANK).t_u
    rows = gather_rnnt_sampling_matrix(j, idx)
    assert np.array_equal(rows.log_probs[0], j.log_probs.data[0, 0])
    assert np.array_equal(rows.log_probs[1], j.log_probs.data[2, 1])


def test_viterbi_indices_are_monotone():
    rng = np.random.default_rng(37)
    for _ in range(20):
        t_len = int(rng.integers(1, 5))
        u_len = int(rng.integers(0, 4))
        j = random_joint_tensor(rng, t_len, u_len, 4)
        y = random_tokens(rng, u_len, 4)
        idx = viterbi_time_indices(j, y, BLANK)
        assert all(a <= b for a, b in zip(idx.t_u, idx.t_u[1:]))
        assert all(0 <= t < t_len for t in idx.t_u)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def random_frame_log_probs(rng, t_len, k):
    return ng.log_softmax(Array(rng.normal(size=(t_len, k))))


def test_ctc_single_frame_single_token():
    rng = np.random.default_rng(41)
    lp = random_frame_log_probs(rng, 1, 3)
    loss = ctc_loss(lp, TokenSequence([1]), BLANK)
    assert abs(loss.item() - (-lp.data[0, 1])) < 1e-12


def test_ctc_all_blank():
    rng = np.random.default_rng(42)
    lp = random_frame_log_probs(rng, 2, 3)
    loss = ctc_loss(lp, TokenSequence([]), BLANK)
    assert abs(loss.item() - (-(lp.data[0, BLANK] + lp.data[1, BLANK]))) < 1e-12


def test_ctc_matches_enumeration_4x2x3():
    rng = np.random.default_rng(43)
    lp = random_frame_log_probs(rng, 4, 3)
    y = TokenSequence([2, 1])
    loss = ctc_loss(lp, y, BLANK)
    want = -oracles.ctc_log_likelihood(lp.data, list(y.ids), BLANK)
    assert abs(loss.item() - want) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(2, 4), st.integers(0, 10_000))
def test_ctc_enumeration_property(t_len, u_len, k, seed):
    rng = np.random.default_rng(seed)
    y = random_tokens(rng, u_len, k)
    if t_len < ctc_min_frames(y):
        return
    lp = random_frame_log_probs(rng, t_len, k)
    loss = ctc_loss(lp, y, BLANK)
    want = -oracles.ctc_log_likelihood(lp.data, list(y.ids), BLANK)
    assert abs(loss.item() - want) < 1e-10


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(44)
    logits = rng.normal(size=(4, 3))
    y = TokenSequence([2, 2])  # repeat forces the blank-skip rule

    def loss_of():
        return ctc_loss(ng.log_softmax(Array(logits)), y, BLANK).item()

    tape = Tape()
    arr = Array(logits, tape)
    loss = ctc_loss(ng.log_softmax(arr), y, BLANK)
    grads = backward(loss, tape)
    numeric = central_difference(loss_of, logits)
    assert grad_close(grads[arr], numeric)


def test_ctc_too_short_raises():
    rng = np.random.default_rng(45)
    lp = random_frame_log_probs(rng, 2, 3)
    with pytest.raises(CtcLengthError):
        ctc_loss(lp, TokenSequence([1, 1]), BLANK)  # repeat needs 3 frames
    assert ctc_min_frames(TokenSequence([1, 1])) == 3
    assert ctc_min_frames(TokenSequence([1, 2])) == 2


def test_lattice_report_is_json_ready():
    import json
    rng = np.random.default_rng(46)
    j = random_joint_tensor(rng, 3, 2, 4)
    y = random_tokens(rng, 2, 4)
    report = lattice_report(j, y, BLANK)
    text = json.dumps(report)
    assert "time_indices_occupancy" in text and "log_alpha" in text
