"""Greedy and alignment-length synchronous beam decoding.

Beam search expands every hypothesis by one lattice edge per step (blank or
token), so all hypotheses at step n have consumed n edges. Hypotheses with
identical token prefixes are merged with log-sum-exp over the transducer
score; their fusion terms coincide because the prediction and LM states
depend only on the tokens. Ranking uses the fused score: transducer
log-probability, optional shallow-fusion LM, internal-LM subtraction, and a
length reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numgrad import Array, ParameterError
from .models import (ELMParams, RNNTParams, TokenSequence, Vocabulary,
                     encode, gru_step)


@dataclass
class DecodeConfig:
    """Search and fusion weights; the mu terms default to plain transducer
    decoding and are tuned per task."""

    beam: int = 8
    temperature: float = 1.6
    mu_lm: float = 0.0
    mu_ilm: float = 0.0
    length_reward: float = 0.0
    max_expand_factor: float = 1.0
    max_tokens: int | None = None
    emit_cap_per_frame: int = 10

    def __post_init__(self):
        if self.beam < 1:
            raise ParameterError(f"beam must be >= 1, got {self.beam}")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Hypothesis:
    """Partial or final decoding result with its score decomposition."""

    tokens: tuple[int, ...]
    score_rnnt: float
    score_lm: float
    score_ilm: float
    combined: float
    pred_h: np.ndarray = field(repr=False)  # (1, H) prediction GRU state
    pred_proj: np.ndarray = field(repr=False)  # (1, J) projected + bias
    ilm_row: np.ndarray = field(repr=False)  # (K,) next-token ILM log probs
    lm_h: np.ndarray | None = field(default=None, repr=False)
    lm_row: np.ndarray | None = field(default=None, repr=False)


def score_hypothesis(h: Hypothesis, cfg: DecodeConfig) -> float:
    """Fused linear combination; the LM term drops out when no LM ran."""
    score = h.score_rnnt - cfg.mu_ilm * h.score_ilm + cfg.length_reward * len(h.tokens)
    if h.lm_row is not None:
        score += cfg.mu_lm * h.score_lm
    return score


def _log_softmax_np(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    m = z.max()
    return z - (np.log(np.exp(z - m).sum()) + m)


def _gru_step_np(gru, x_row: np.ndarray, h: np.ndarray) -> np.ndarray:
    # same math as the taped path, run without recording
    return gru_step(gru, Array(x_row), Array(h)).data


class _PredNet:
    """Stepwise prediction-network state shared by greedy and beam search."""

    def __init__(self, params: RNNTParams, vocab: Vocabulary):
        self.p = params.prediction
        self.j = params.joint
        self.vocab = vocab

    def start(self) -> tuple[np.ndarray, np.ndarray]:
        h = np.zeros((1, self.p.gru.hidden))
        return self.step(h, self.vocab.bos_id)

    def step(self, h: np.ndarray, token: int) -> tuple[np.ndarray, np.ndarray]:
        x = self.p.embed.data[token:token + 1]
        h_new = _gru_step_np(self.p.gru, x, h)
        out = h_new @ self.p.out_w.data + self.p.out_b.data
        proj = out @ self.j.pred_w.data + self.j.bias.data
        return h_new, proj

    def joint_logits(self, enc_proj_row: np.ndarray, pred_proj: np.ndarray) -> np.ndarray:
        hidden = np.tanh(enc_proj_row + pred_proj[0])
        return hidden @ self.j.out_w.data + self.j.out_b.data[0]

    def ilm_row(self, pred_proj: np.ndarray) -> np.ndarray:
        # the joint with its acoustic input zeroed, temperature 1
        hidden = np.tanh(pred_proj[0])
        return _log_softmax_np(hidden @ self.j.out_w.data + self.j.out_b.data[0])


class _ElmNet:
    def __init__(self, params: ELMParams, vocab: Vocabulary):
        self.p = params
        self.vocab = vocab

    def start(self) -> tuple[np.ndarray, np.ndarray]:
        h = np.zeros((1, self.p.gru.hidden))
        return self.step(h, self.vocab.bos_id)

    def step(self, h: np.ndarray, token: int) -> tuple[np.ndarray, np.ndarray]:
        x = self.p.embed.data[token:token + 1]
        h_new = _gru_step_np(self.p.gru, x, h)
        row = _log_softmax_np(h_new[0] @ self.p.out_w.data + self.p.out_b.data[0])
        return h_new, row


def _encoder_projection(x, params: RNNTParams) -> np.ndarray:
    h_enc = encode(x, params.encoder).data
    return h_enc @ params.joint.enc_w.data


def greedy_decode(x, params: RNNTParams, vocab: Vocabulary,
                  cfg: DecodeConfig | None = None) -> TokenSequence:
    """Time-synchronous argmax walk; emits until blank wins, then advances."""
    cfg = cfg or DecodeConfig(beam=1)
    enc_proj = _encoder_projection(x, params)
    net = _PredNet(params, vocab)
    h, proj = net.start()
    out: list[int] = []
    for t in range(enc_proj.shape[0]):
        for _ in range(cfg.emit_cap_per_frame):
            logits = net.joint_logits(enc_proj[t], proj)
            k = int(np.argmax(logits))
            if k == vocab.blank_id:
                break
            out.append(k)
            h, proj = net.step(h, k)
    return TokenSequence(out)


def beam_decode(x, params: RNNTParams, vocab: Vocabulary, cfg: DecodeConfig,
                elm: ELMParams | None = None) -> list[Hypothesis]:
    """Alignment-length synchronous beam search, best hypothesis first."""
    enc_proj = _encoder_projection(x, params)
    t_max = enc_proj.shape[0]
    u_max = cfg.max_tokens if cfg.max_tokens is not None \
        else int(cfg.max_expand_factor * t_max)
    net = _PredNet(params, vocab)
    elm_net = _ElmNet(elm, vocab) if elm is not None else None

    pred_h, pred_proj = net.start()
    root = Hypothesis(
        tokens=(), score_rnnt=0.0, score_lm=0.0, score_ilm=0.0, combined=0.0,
        pred_h=pred_h, pred_proj=pred_proj, ilm_row=net.ilm_row(pred_proj),
    )
    if elm_net is not None:
        root.lm_h, root.lm_row = elm_net.start()
    root.combined = score_hypothesis(root, cfg)

    nonblank = [k for k in range(vocab.size) if k != vocab.blank_id]
    beam_hyps = [root]
    finals: list[Hypothesis] = []
    for n in range(t_max + u_max):
        # candidate: (tokens, score_rnnt, score_lm, score_ilm, parent)
        merged: dict[tuple[int, ...], list] = {}
        for hyp in beam_hyps:
            t = n - len(hyp.tokens)
            if t > t_max - 1:
                continue
            logp = _log_softmax_np(net.joint_logits(enc_proj[t], hyp.pred_proj),
                                   cfg.temperature)
            blank_cand = [hyp.tokens, hyp.score_rnnt + logp[vocab.blank_id],
                          hyp.score_lm, hyp.score_ilm, hyp]
            if t == t_max - 1:
                finals.append(_materialize(blank_cand, net, elm_net, cfg, extend=None))
            else:
                _merge(merged, blank_cand)
            if len(hyp.tokens) < u_max:
                for k in nonblank:
                    cand = [hyp.tokens + (k,),
                            hyp.score_rnnt + logp[k],
                            hyp.score_lm + (hyp.lm_row[k] if hyp.lm_row is not None else 0.0),
                            hyp.score_ilm + hyp.ilm_row[k],
                            hyp]
                    _merge(merged, cand)
        if not merged:
            break
        ranked = sorted(merged.values(),
                        key=lambda c: (_cand_score(c, cfg, elm_net), c[0]),
                        reverse=True)
        beam_hyps = [_materialize(c, net, elm_net, cfg,
                                  extend=c[0][-1] if len(c[0]) > len(c[4].tokens) else None)
                     for c in ranked[:cfg.beam]]
    finals.sort(key=lambda h: (h.combined, h.tokens), reverse=True)
    return finals if finals else beam_hyps


def _cand_score(cand, cfg: DecodeConfig, elm_net) -> float:
    tokens, rnnt, lm, ilm, _ = cand
    score = rnnt - cfg.mu_ilm * ilm + cfg.length_reward * len(tokens)
    if elm_net is not None:
        score += cfg.mu_lm * lm
    return score


def _merge(merged: dict, cand: list) -> None:
    held = merged.get(tuple(cand[0]))
    if held is None:
        merged[tuple(cand[0])] = cand
    else:
        # same tokens: identical LM/ILM terms and states; pool the path mass
        held[1] = float(np.logaddexp(held[1], cand[1]))


def _materialize(cand, net: _PredNet, elm_net, cfg: DecodeConfig,
                 extend: int | None) -> Hypothesis:
    tokens, rnnt, lm, ilm, parent = cand
    hyp = Hypothesis(tokens=tuple(tokens), score_rnnt=rnnt, score_lm=lm,
                     score_ilm=ilm, combined=0.0, pred_h=parent.pred_h,
                     pred_proj=parent.pred_proj, ilm_row=parent.ilm_row,
                     lm_h=parent.lm_h, lm_row=parent.lm_row)
    if extend is not None:
        hyp.pred_h, hyp.pred_proj = net.step(parent.pred_h, extend)
        hyp.ilm_row = net.ilm_row(hyp.pred_proj)
        if elm_net is not None:
            hyp.lm_h, hyp.lm_row = elm_net.step(parent.lm_h, extend)
    hyp.combined = score_hypothesis(hyp, cfg)
    return hyp
