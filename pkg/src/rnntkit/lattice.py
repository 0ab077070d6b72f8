"""Dynamic programs over the (T, U+1) transducer lattice.

Conventions: node (t, u) has consumed t frames and emitted u tokens. Blank
advances t, token y_{u+1} advances u, and every complete path exits with a
final blank from (T-1, U). All math is in log space; occupancies are
exponentiated only at the end. Loss gradients are computed in closed form
from the forward-backward variables and injected into the tape, rather than
taping the recursions themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .numgrad import Array, ContractError
from .models import JointTensor, TokenSequence

NEG_INF = float("-inf")


class CtcLengthError(ContractError):
    """The utterance has too few frames for its expanded label sequence."""


def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


@dataclass
class LatticeVars:
    """Forward/backward variables and the total path log-likelihood.

    ``log_beta[t, u]`` includes the transitions leaving (t, u), so
    ``log_alpha + log_beta`` at any node is the log-mass of paths through it.
    """

    log_alpha: np.ndarray  # (T, U+1)
    log_beta: np.ndarray  # (T, U+1)
    log_likelihood: float


@dataclass(frozen=True)
class AlignmentIndices:
    """Per-token emission times, monotone non-decreasing."""

    t_u: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.t_u)


@dataclass
class SamplingMatrix:
    """U rows of log class probabilities feeding scheduled sampling."""

    log_probs: np.ndarray  # (U, K)
    source: str  # "elm" | "ilm" | "rnnt"


def _check_joint(j: JointTensor, y: TokenSequence) -> tuple[np.ndarray, list[int]]:
    lp = j.log_probs.data
    if lp.ndim != 3:
        raise ContractError(f"joint tensor must be 3-D, got shape {lp.shape}")
    if lp.shape[1] != len(y) + 1:
        raise ContractError(
            f"joint tensor has {lp.shape[1]} columns but |y|+1 = {len(y) + 1}")
    return lp, list(y.ids)


def rnnt_forward_backward(j: JointTensor, y: TokenSequence, blank_id: int) -> LatticeVars:
    """Log-space forward-backward over the transducer lattice."""
    lp, labels = _check_joint(j, y)
    t_len, u_cols, _ = lp.shape
    u_len = u_cols - 1

    alpha = np.full((t_len, u_cols), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(1, t_len):
        alpha[t, 0] = alpha[t - 1, 0] + lp[t - 1, 0, blank_id]
    for u in range(1, u_cols):
        alpha[0, u] = alpha[0, u - 1] + lp[0, u - 1, labels[u - 1]]
    for t in range(1, t_len):
        row_prev = alpha[t - 1]
        row = alpha[t]
        for u in range(1, u_cols):
            row[u] = _logaddexp(row_prev[u] + lp[t - 1, u, blank_id],
                                row[u - 1] + lp[t, u - 1, labels[u - 1]])

    beta = np.full((t_len, u_cols), NEG_INF)
    beta[t_len - 1, u_len] = lp[t_len - 1, u_len, blank_id]
    for t in range(t_len - 2, -1, -1):
        beta[t, u_len] = lp[t, u_len, blank_id] + beta[t + 1, u_len]
    for u in range(u_len - 1, -1, -1):
        beta[t_len - 1, u] = lp[t_len - 1, u, labels[u]] + beta[t_len - 1, u + 1]
    for t in range(t_len - 2, -1, -1):
        row_next = beta[t + 1]
        row = beta[t]
        for u in range(u_len - 1, -1, -1):
            row[u] = _logaddexp(lp[t, u, blank_id] + row_next[u],
                                lp[t, u, labels[u]] + row[u + 1])

    log_likelihood = float(alpha[t_len - 1, u_len] + lp[t_len - 1, u_len, blank_id])
    return LatticeVars(alpha, beta, log_likelihood)


def _transition_occupancies(v: LatticeVars, lp: np.ndarray, labels: list[int],
                            blank_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mass of each blank / emit transition, linear space."""
    t_len, u_cols = v.log_alpha.shape
    u_len = u_cols - 1
    ll = v.log_likelihood

    # beta after taking blank from (t, u): beta[t+1, u]; the exit blank from
    # (T-1, U) has nothing after it.
    beta_after_blank = np.full((t_len, u_cols), NEG_INF)
    if t_len > 1:
        beta_after_blank[:-1] = v.log_beta[1:]
    beta_after_blank[t_len - 1, u_len] = 0.0

    with np.errstate(invalid="ignore"):
        gamma_blank = np.exp(v.log_alpha + lp[:, :, blank_id] + beta_after_blank - ll)
        gamma_emit = np.zeros((t_len, u_cols))
        for u in range(u_len):
            gamma_emit[:, u] = np.exp(v.log_alpha[:, u] + lp[:, u, labels[u]]
                                      + v.log_beta[:, u + 1] - ll)
    return np.nan_to_num(gamma_blank, nan=0.0), np.nan_to_num(gamma_emit, nan=0.0)


def rnnt_loss_grad(j: JointTensor, y: TokenSequence, blank_id: int,
                   v: LatticeVars | None = None) -> np.ndarray:
    """Closed-form gradient of the RNNT loss w.r.t. the joint logits."""
    lp, labels = _check_joint(j, y)
    if v is None:
        v = rnnt_forward_backward(j, y, blank_id)
    gamma_blank, gamma_emit = _transition_occupancies(v, lp, labels, blank_id)
    node = gamma_blank + gamma_emit  # posterior mass through each node
    probs = np.exp(lp)
    grad = probs * node[:, :, None]
    grad[:, :, blank_id] -= gamma_blank
    for u in range(len(labels)):
        grad[:, u, labels[u]] -= gamma_emit[:, u]
    return grad / j.temperature


def _loss_grad_log_probs(v: LatticeVars, lp: np.ndarray, labels: list[int],
                         blank_id: int) -> np.ndarray:
    """Gradient of -log_likelihood w.r.t. the per-node log probabilities."""
    gamma_blank, gamma_emit = _transition_occupancies(v, lp, labels, blank_id)
    grad = np.zeros_like(lp)
    grad[:, :, blank_id] = -gamma_blank
    for u in range(len(labels)):
        grad[:, u, labels[u]] -= gamma_emit[:, u]
    return grad


def rnnt_loss(j: JointTensor, y: TokenSequence, blank_id: int) -> tuple[Array, LatticeVars]:
    """Negative log-likelihood as a taped scalar, plus the lattice variables."""
    lp, labels = _check_joint(j, y)
    v = rnnt_forward_backward(j, y, blank_id)
    grad = _loss_grad_log_probs(v, lp, labels, blank_id)
    loss = ng.custom_grad(-v.log_likelihood, [j.log_probs], [lambda g: g * grad])
    return loss, v


def emission_occupancy(v: LatticeVars, j: JointTensor, y: TokenSequence,
                       blank_id: int) -> np.ndarray:
    """gamma[t, u-1]: posterior probability that token u is emitted at frame t."""
    lp, labels = _check_joint(j, y)
    if v.log_alpha.shape != (lp.shape[0], lp.shape[1]):
        raise ContractError("lattice variables do not match the joint tensor")
    _, gamma_emit = _transition_occupancies(v, lp, labels, blank_id)
    return gamma_emit[:, :len(labels)]


def extract_time_indices(gamma: np.ndarray) -> AlignmentIndices:
    """Per-token argmax over the time axis, ties to the smallest t.

    Raw occupancy argmaxes can invert; a running max clamp restores
    monotonicity.
    """
    if gamma.ndim != 2:
        raise ContractError(f"occupancy must be (T, U), got shape {gamma.shape}")
    indices = []
    prev = 0
    for u in range(gamma.shape[1]):
        t = int(np.argmax(gamma[:, u]))
        t = max(t, prev)
        indices.append(t)
        prev = t
    return AlignmentIndices(tuple(indices))


def viterbi_time_indices(j: JointTensor, y: TokenSequence, blank_id: int) -> AlignmentIndices:
    """Emission times along the single best lattice path."""
    lp, labels = _check_joint(j, y)
    t_len, u_cols, _ = lp.shape
    u_len = u_cols - 1
    score = np.full((t_len, u_cols), NEG_INF)
    from_emit = np.zeros((t_len, u_cols), dtype=bool)
    score[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u_cols):
            if t == 0 and u == 0:
                continue
            blank_branch = score[t - 1, u] + lp[t - 1, u, blank_id] if t > 0 else NEG_INF
            emit_branch = score[t, u - 1] + lp[t, u - 1, labels[u - 1]] if u > 0 else NEG_INF
            if emit_branch > blank_branch:
                score[t, u] = emit_branch
                from_emit[t, u] = True
            else:
                score[t, u] = blank_branch
    t, u = t_len - 1, u_len
    times = [0] * u_len
    while t > 0 or u > 0:
        if from_emit[t, u]:
            times[u - 1] = t
            u -= 1
        else:
            t -= 1
    return AlignmentIndices(tuple(times))


def gather_rnnt_sampling_matrix(j: JointTensor, idx: AlignmentIndices) -> SamplingMatrix:
    """Rows j[t_u, u-1]: the distribution that emits token u at its time index."""
    lp = j.log_probs.data
    u_len = lp.shape[1] - 1
    if len(idx) != u_len:
        raise ContractError(f"need {u_len} time indices, got {len(idx)}")
    rows = np.empty((u_len, lp.shape[2]))
    for u, t in enumerate(idx.t_u):
        if not 0 <= t < lp.shape[0]:
            raise ContractError(f"time index {t} outside [0, {lp.shape[0]})")
        rows[u] = lp[t, u]
    return SamplingMatrix(rows, "rnnt")


# ---------------------------------------------------------------------------
# CTC auxiliary loss
# ---------------------------------------------------------------------------


def ctc_min_frames(y: TokenSequence) -> int:
    """Frames needed to emit y: one per token plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(y.ids, y.ids[1:]) if a == b)
    return len(y) + repeats


def ctc_loss(log_probs: Array, y: TokenSequence, blank_id: int) -> Array:
    """CTC negative log-likelihood over the 2U+1 expanded label sequence.

    ``log_probs`` is (T, K) per-frame log distributions; the gradient w.r.t.
    them is the negative state posterior, injected into the tape.
    """
    lp = log_probs.data
    if lp.ndim != 2:
        raise ContractError(f"ctc needs (T, K) log probs, got shape {lp.shape}")
    t_len = lp.shape[0]
    if t_len < ctc_min_frames(y):
        raise CtcLengthError(
            f"{t_len} frames cannot carry {len(y)} tokens with repeats")

    labels = list(y.ids)
    states = [blank_id]
    for tok in labels:
        states.extend((tok, blank_id))
    n_states = len(states)  # 2U+1

    def allow_skip(s: int) -> bool:
        # skip over a blank between two different labels
        return s >= 2 and s % 2 == 1 and states[s] != states[s - 2]

    alpha = np.full((t_len, n_states), NEG_INF)
    alpha[0, 0] = lp[0, states[0]]
    if n_states > 1:
        alpha[0, 1] = lp[0, states[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        for s in range(n_states):
            best = prev[s]
            if s >= 1:
                best = _logaddexp(best, prev[s - 1])
            if allow_skip(s):
                best = _logaddexp(best, prev[s - 2])
            alpha[t, s] = best + lp[t, states[s]]

    ll = _logaddexp(alpha[t_len - 1, n_states - 1],
                    alpha[t_len - 1, n_states - 2] if n_states > 1 else NEG_INF)
    if ll == NEG_INF:
        raise CtcLengthError("no feasible alignment")

    # beta_ex[t, s]: completing from state s after frame t, frame t excluded
    beta = np.full((t_len, n_states), NEG_INF)
    beta[t_len - 1, n_states - 1] = 0.0
    if n_states > 1:
        beta[t_len - 1, n_states - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        for s in range(n_states):
            best = nxt[s] + lp[t + 1, states[s]]
            if s + 1 < n_states:
                best = _logaddexp(best, nxt[s + 1] + lp[t + 1, states[s + 1]])
            if s + 2 < n_states and allow_skip(s + 2):
                best = _logaddexp(best, nxt[s + 2] + lp[t + 1, states[s + 2]])
            beta[t, s] = best

    with np.errstate(invalid="ignore"):
        posterior = np.exp(alpha + beta - ll)
    posterior = np.nan_to_num(posterior, nan=0.0)
    grad = np.zeros_like(lp)
    for s, tok in enumerate(states):
        grad[:, tok] -= posterior[:, s]

    return ng.custom_grad(-ll, [log_probs], [lambda g: g * grad])


def lattice_report(j: JointTensor, y: TokenSequence, blank_id: int) -> dict:
    """JSON-ready dump of the lattice quantities for one utterance."""
    v = rnnt_forward_backward(j, y, blank_id)
    gamma = emission_occupancy(v, j, y, blank_id)
    occ_idx = extract_time_indices(gamma)
    vit_idx = viterbi_time_indices(j, y, blank_id)
    return {
        "loss": -v.log_likelihood,
        "log_likelihood": v.log_likelihood,
        "log_alpha": v.log_alpha.tolist(),
        "log_beta": v.log_beta.tolist(),
        "emission_occupancy": gamma.tolist(),
        "time_indices_occupancy": list(occ_idx.t_u),
        "time_indices_viterbi": list(vit_idx.t_u),
    }
