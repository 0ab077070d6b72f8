"""Scheduled-sampling policies over token sequences.

Token-level sampling replaces individual ground-truth tokens by the source
model's argmax with probability lambda. Utterance-level sampling swaps the
whole sequence for the source argmax sequence, gated by lambda times the
source's current proficiency so that an inaccurate early model rarely
replaces anything. Sources run in inference mode; the sampled tokens are
plain integers, so no gradient can reach the source forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numgrad import ContractError, ParameterError
from .models import (AcousticSequence, ELMParams, RNNTParams, TokenSequence,
                     Vocabulary, elm_forward, encode, ilm_forward, joint,
                     predict_states)
from . import lattice
from .lattice import SamplingMatrix

LEVELS = ("off", "token", "utterance")
SOURCES = ("elm", "ilm", "rnnt")
RNNT_PATHS = ("occupancy", "viterbi")
ACC_SCOPES = ("utterance", "minibatch")


@dataclass(frozen=True)
class SamplingPolicy:
    """Which sampling variant runs, from which source, and how often."""

    level: str = "off"
    source: str = "ilm"
    lam: float = 0.0
    rng_seed: int = 0
    rnnt_path: str = "occupancy"
    acc_scope: str = "utterance"

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ParameterError(f"ss.level must be one of {LEVELS}, got {self.level!r}")
        if self.source not in SOURCES:
            raise ParameterError(f"ss.source must be one of {SOURCES}, got {self.source!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"ss.lambda must lie in [0, 1], got {self.lam}")
        if self.level == "token" and self.source == "rnnt":
            raise ParameterError(
                "sampling from the full transducer is utterance-level only")
        if self.rnnt_path not in RNNT_PATHS:
            raise ParameterError(f"ss.rnnt_path must be one of {RNNT_PATHS}")
        if self.acc_scope not in ACC_SCOPES:
            raise ParameterError(f"ss.acc_scope must be one of {ACC_SCOPES}")


@dataclass(frozen=True)
class SampleOutcome:
    """Result of applying a policy to one utterance."""

    y_prime: TokenSequence
    replaced_positions: tuple[int, ...]
    acc_value: float | None
    rho_draws: tuple[float, ...]

    @property
    def replaced(self) -> bool:
        return len(self.replaced_positions) > 0


def utterance_rng(seed: int, epoch: int, utt_index: int) -> np.random.Generator:
    """Stream for one utterance; order-independent across the batch."""
    return np.random.default_rng([seed, epoch, utt_index])


def blank_suppressed_argmax(rows: np.ndarray, blank_id: int) -> np.ndarray:
    """Per-row argmax with the blank class removed from contention."""
    masked = rows.copy()
    masked[:, blank_id] = -np.inf
    return masked.argmax(axis=1)


def proficiency(y_hat: TokenSequence, y: TokenSequence) -> float:
    """Position-wise accuracy of y_hat against y; both length U."""
    if len(y_hat) != len(y):
        raise ContractError(f"length mismatch: {len(y_hat)} vs {len(y)}")
    if len(y) == 0:
        return 1.0
    matches = sum(1 for a, b in zip(y_hat.ids, y.ids) if a == b)
    return matches / len(y)


def token_level_ss(y: TokenSequence, lm_rows: SamplingMatrix, lam: float,
                   rng: np.random.Generator, blank_id: int) -> SampleOutcome:
    """Replace position u by the LM argmax where lambda beats its draw.

    One uniform draw per position, consumed in position order. The source
    rows are computed from the original ground-truth prefix (single pass).
    """
    if lm_rows.source == "rnnt":
        raise ContractError("token-level sampling cannot use the rnnt source")
    if lm_rows.log_probs.shape[0] != len(y):
        raise ContractError(
            f"{lm_rows.log_probs.shape[0]} rows for {len(y)} tokens")
    rhos = rng.random(len(y))
    picks = blank_suppressed_argmax(lm_rows.log_probs, blank_id)
    out = []
    replaced = []
    for u, tok in enumerate(y.ids):
        if lam > rhos[u]:
            out.append(int(picks[u]))
            replaced.append(u)
        else:
            out.append(tok)
    return SampleOutcome(TokenSequence(out), tuple(replaced), None, tuple(rhos.tolist()))


def utterance_level_ss(y: TokenSequence, source_rows: SamplingMatrix, lam: float,
                       rng: np.random.Generator, blank_id: int,
                       acc_override: float | None = None) -> SampleOutcome:
    """Swap the whole sequence for the source argmax when lambda * Acc beats
    a single uniform draw.

    ``acc_override`` supports minibatch-scope gating, where the gate uses the
    batch-mean proficiency instead of this utterance's own.
    """
    if source_rows.log_probs.shape[0] != len(y):
        raise ContractError(
            f"{source_rows.log_probs.shape[0]} rows for {len(y)} tokens")
    picks = blank_suppressed_argmax(source_rows.log_probs, blank_id)
    y_hat = TokenSequence(int(p) for p in picks)
    acc = proficiency(y_hat, y)
    gate = acc if acc_override is None else acc_override
    rho = float(rng.random())
    if lam * gate > rho:
        return SampleOutcome(y_hat, tuple(range(len(y))), acc, (rho,))
    return SampleOutcome(y, (), acc, (rho,))


def build_sampling_matrix(source: str, y: TokenSequence, vocab: Vocabulary,
                          rnnt: RNNTParams | None = None,
                          elm: ELMParams | None = None,
                          acoustic: AcousticSequence | None = None,
                          rnnt_path: str = "occupancy") -> SamplingMatrix:
    """Run the chosen source over the ground-truth tokens, inference mode.

    Callers must invoke this outside any recording scope; the returned rows
    are plain numpy data.
    """
    if source == "elm":
        if elm is None:
            raise ContractError("elm source requires pretrained ELM parameters")
        rows = elm_forward(y, elm, vocab)
        return SamplingMatrix(rows.data.copy(), "elm")
    if source == "ilm":
        if rnnt is None:
            raise ContractError("ilm source requires the transducer parameters")
        rows = ilm_forward(y, rnnt.prediction, rnnt.joint, vocab)
        return SamplingMatrix(rows.data.copy(), "ilm")
    if source == "rnnt":
        if rnnt is None or acoustic is None:
            raise ContractError("rnnt source requires parameters and acoustics")
        h_enc = encode(acoustic, rnnt.encoder)
        h_pred = predict_states(y, rnnt.prediction, vocab)
        j = joint(h_enc, h_pred, rnnt.joint)
        if rnnt_path == "viterbi":
            idx = lattice.viterbi_time_indices(j, y, vocab.blank_id)
        else:
            v = lattice.rnnt_forward_backward(j, y, vocab.blank_id)
            gamma = lattice.emission_occupancy(v, j, y, vocab.blank_id)
            idx = lattice.extract_time_indices(gamma)
        return lattice.gather_rnnt_sampling_matrix(j, idx)
    raise ParameterError(f"unknown sampling source {source!r}")


def apply_policy(policy: SamplingPolicy, y: TokenSequence, rows: SamplingMatrix | None,
                 rng: np.random.Generator, blank_id: int,
                 acc_override: float | None = None) -> SampleOutcome:
    """Dispatch on the policy level; level=off passes the tokens through."""
    if policy.level == "off":
        return SampleOutcome(y, (), None, ())
    if rows is None:
        raise ContractError("active policy needs a sampling matrix")
    if policy.level == "token":
        return token_level_ss(y, rows, policy.lam, rng, blank_id)
    return utterance_level_ss(y, rows, policy.lam, rng, blank_id, acc_override)
