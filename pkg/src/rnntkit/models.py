"""Transducer model components: encoder, prediction and joint networks,
the external language model, and the internal-LM view of the shared
prediction+joint parameters.

All forward functions are pure given their parameter records. Recording for
backpropagation is controlled by attaching a tape to the parameter arrays
(see ``recording``); with no tape attached the same code runs in inference
mode.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numgrad as ng
from .numgrad import Array, ContractError, ParameterError, Tape


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory including the blank and sentence-boundary symbols."""

    tokens: tuple[str, ...]
    blank_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("token strings must be unique")
        for name, idx in (("blank", self.blank_id), ("bos", self.bos_id), ("eos", self.eos_id)):
            if not 0 <= idx < len(self.tokens):
                raise ContractError(f"{name}_id {idx} outside vocabulary of size {len(self.tokens)}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def content_ids(self) -> tuple[int, ...]:
        special = {self.blank_id, self.bos_id, self.eos_id}
        return tuple(i for i in range(self.size) if i not in special)

    @classmethod
    def from_content(cls, content: Sequence[str]) -> "Vocabulary":
        return cls(tokens=("<blank>", "<bos>", "<eos>", *content))

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "blank_id": self.blank_id,
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), d["blank_id"], d["bos_id"], d["eos_id"])


@dataclass(frozen=True)
class TokenSequence:
    """A label sequence over the vocabulary; never contains blank."""

    ids: tuple[int, ...]

    def __init__(self, ids: Iterable[int]):
        object.__setattr__(self, "ids", tuple(int(i) for i in ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)

    def __getitem__(self, i):
        return self.ids[i]

    def validate(self, vocab: Vocabulary) -> "TokenSequence":
        for t in self.ids:
            if t == vocab.blank_id:
                raise ContractError("blank must not appear in a token sequence")
            if not 0 <= t < vocab.size:
                raise ContractError(f"token id {t} outside vocabulary of size {vocab.size}")
        return self


@dataclass
class AcousticSequence:
    """Feature frames for one utterance, frames shaped (T', F)."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"frames must be (T', F) with T' >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("acoustic features must be finite")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ModelConfig:
    """Desk-scale layer sizes. The joint hidden size and tanh nonlinearity
    are local choices; nothing downstream depends on them beyond shape."""

    feature_dim: int = 8
    downsample: int = 2
    conv_kernel: int = 3
    enc_hidden: int = 48
    enc_layers: int = 2
    enc_out: int = 48
    pred_embed: int = 32
    pred_hidden: int = 64
    pred_out: int = 48
    joint_hidden: int = 48
    elm_embed: int = 32
    elm_hidden: int = 64

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """One gated recurrent layer; gate order in the fused matrices is r, z, n."""

    w: Array  # (in, 3H)
    u: Array  # (H, 3H)
    b: Array  # (1, 3H)

    @property
    def hidden(self) -> int:
        return self.u.shape[0]


@dataclass
class EncoderParams:
    conv_w: Array  # (kernel * F, H)
    conv_b: Array  # (1, H)
    layers: list[GruParams]
    out_w: Array  # (H, enc_out)
    out_b: Array  # (1, enc_out)
    stride: int
    kernel: int


@dataclass
class PredictionParams:
    embed: Array  # (K, E)
    gru: GruParams
    out_w: Array  # (H, pred_out)
    out_b: Array  # (1, pred_out)


@dataclass
class JointParams:
    enc_w: Array  # (enc_out, J)
    pred_w: Array  # (pred_out, J)
    bias: Array  # (1, J)
    out_w: Array  # (J, K)
    out_b: Array  # (1, K)


@dataclass
class ELMParams:
    embed: Array  # (K, E)
    gru: GruParams
    out_w: Array  # (H, K)
    out_b: Array  # (1, K)


@dataclass
class RNNTParams:
    """Full transducer parameter set. The internal LM is the prediction and
    joint records themselves; there is no copy to synchronize."""

    encoder: EncoderParams
    prediction: PredictionParams
    joint: JointParams
    ctc_w: Array  # (enc_out, K), discarded for decoding
    ctc_b: Array  # (1, K)

    def named(self) -> dict[str, Array]:
        out = {
            "enc.conv_w": self.encoder.conv_w,
            "enc.conv_b": self.encoder.conv_b,
            "enc.out_w": self.encoder.out_w,
            "enc.out_b": self.encoder.out_b,
        }
        for i, g in enumerate(self.encoder.layers):
            out[f"enc.gru{i}.w"] = g.w
            out[f"enc.gru{i}.u"] = g.u
            out[f"enc.gru{i}.b"] = g.b
        out.update({
            "pred.embed": self.prediction.embed,
            "pred.gru.w": self.prediction.gru.w,
            "pred.gru.u": self.prediction.gru.u,
            "pred.gru.b": self.prediction.gru.b,
            "pred.out_w": self.prediction.out_w,
            "pred.out_b": self.prediction.out_b,
            "joint.enc_w": self.joint.enc_w,
            "joint.pred_w": self.joint.pred_w,
            "joint.bias": self.joint.bias,
            "joint.out_w": self.joint.out_w,
            "joint.out_b": self.joint.out_b,
            "ctc.w": self.ctc_w,
            "ctc.b": self.ctc_b,
        })
        return out

    def arrays(self) -> list[Array]:
        return list(self.named().values())


def elm_named(p: ELMParams) -> dict[str, Array]:
    return {
        "elm.embed": p.embed,
        "elm.gru.w": p.gru.w,
        "elm.gru.u": p.gru.u,
        "elm.gru.b": p.gru.b,
        "elm.out_w": p.out_w,
        "elm.out_b": p.out_b,
    }


def elm_arrays(p: ELMParams) -> list[Array]:
    return list(elm_named(p).values())


@contextmanager
def recording(params: Iterable[Array], tape: Tape):
    """Attach ``tape`` to parameter arrays for the duration of a forward pass.

    Outside this scope the parameters are plain constants, so sampling-source
    forwards run unrecorded and cannot receive gradient.
    """
    params = list(params)
    for p in params:
        p.tape = tape
    try:
        yield tape
    finally:
        for p in params:
            p.tape = None


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Array:
    a = 1.0 / np.sqrt(max(fan_in, 1))
    return Array(rng.uniform(-a, a, size=shape))


def _init_gru(rng: np.random.Generator, in_dim: int, hidden: int) -> GruParams:
    return GruParams(
        w=_uniform(rng, (in_dim, 3 * hidden), in_dim),
        u=_uniform(rng, (hidden, 3 * hidden), hidden),
        b=Array(np.zeros((1, 3 * hidden))),
    )


def init_rnnt(cfg: ModelConfig, vocab: Vocabulary, rng: np.random.Generator) -> RNNTParams:
    k = cfg.conv_kernel
    enc_in = k * cfg.feature_dim
    encoder = EncoderParams(
        conv_w=_uniform(rng, (enc_in, cfg.enc_hidden), enc_in),
        conv_b=Array(np.zeros((1, cfg.enc_hidden))),
        layers=[_init_gru(rng, cfg.enc_hidden, cfg.enc_hidden) for _ in range(cfg.enc_layers)],
        out_w=_uniform(rng, (cfg.enc_hidden, cfg.enc_out), cfg.enc_hidden),
        out_b=Array(np.zeros((1, cfg.enc_out))),
        stride=cfg.downsample,
        kernel=k,
    )
    prediction = PredictionParams(
        embed=_uniform(rng, (vocab.size, cfg.pred_embed), cfg.pred_embed),
        gru=_init_gru(rng, cfg.pred_embed, cfg.pred_hidden),
        out_w=_uniform(rng, (cfg.pred_hidden, cfg.pred_out), cfg.pred_hidden),
        out_b=Array(np.zeros((1, cfg.pred_out))),
    )
    joint = JointParams(
        enc_w=_uniform(rng, (cfg.enc_out, cfg.joint_hidden), cfg.enc_out),
        pred_w=_uniform(rng, (cfg.pred_out, cfg.joint_hidden), cfg.pred_out),
        bias=Array(np.zeros((1, cfg.joint_hidden))),
        out_w=_uniform(rng, (cfg.joint_hidden, vocab.size), cfg.joint_hidden),
        out_b=Array(np.zeros((1, vocab.size))),
    )
    ctc_w = _uniform(rng, (cfg.enc_out, vocab.size), cfg.enc_out)
    ctc_b = Array(np.zeros((1, vocab.size)))
    return RNNTParams(encoder, prediction, joint, ctc_w, ctc_b)


def init_elm(cfg: ModelConfig, vocab: Vocabulary, rng: np.random.Generator) -> ELMParams:
    return ELMParams(
        embed=_uniform(rng, (vocab.size, cfg.elm_embed), cfg.elm_embed),
        gru=_init_gru(rng, cfg.elm_embed, cfg.elm_hidden),
        out_w=_uniform(rng, (cfg.elm_hidden, vocab.size), cfg.elm_hidden),
        out_b=Array(np.zeros((1, vocab.size))),
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def gru_step(p: GruParams, x: Array, h: Array) -> Array:
    """One recurrence step; x is (1, in), h is (1, H)."""
    hdim = p.hidden
    gx = (x @ p.w) + p.b
    gh = h @ p.u
    r = ng.sigmoid(gx[:, :hdim] + gh[:, :hdim])
    z = ng.sigmoid(gx[:, hdim:2 * hdim] + gh[:, hdim:2 * hdim])
    n = ng.tanh(gx[:, 2 * hdim:] + r * gh[:, 2 * hdim:])
    return n + z * (h - n)


def _gru_scan(p: GruParams, xs: Array) -> Array:
    """Run the layer over the rows of xs (T, in) -> (T, H)."""
    steps = xs.shape[0]
    h = Array(np.zeros((1, p.hidden)))
    rows = []
    for t in range(steps):
        h = gru_step(p, xs[t:t + 1, :], h)
        rows.append(h)
    return ng.concat(rows, axis=0)


def _im2col(frames: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Zero-padded sliding windows so output length is ceil(T'/stride)."""
    t_in, fdim = frames.shape
    pad = (kernel - 1) // 2
    padded = np.zeros((t_in + 2 * pad, fdim))
    padded[pad:pad + t_in] = frames
    t_out = (t_in - 1) // stride + 1
    patches = np.empty((t_out, kernel * fdim))
    for i in range(t_out):
        patches[i] = padded[i * stride:i * stride + kernel].reshape(-1)
    return patches


def encode(x: AcousticSequence, p: EncoderParams) -> Array:
    """Acoustic frames (T', F) -> encoder states (T, D), T = ceil(T'/stride)."""
    if x.num_frames < p.stride:
        raise ContractError(
            f"need at least {p.stride} frames to downsample, got {x.num_frames}")
    patches = Array(_im2col(x.frames, p.kernel, p.stride))
    h = ng.tanh((patches @ p.conv_w) + p.conv_b)
    for layer in p.layers:
        h = _gru_scan(layer, h)
    return (h @ p.out_w) + p.out_b


def predict_states(y: TokenSequence, p: PredictionParams, vocab: Vocabulary) -> Array:
    """Label prefix states: row u is conditioned on y_1..y_u, row 0 on bos."""
    y.validate(vocab)
    ids = [vocab.bos_id, *y.ids]
    emb = ng.embedding(p.embed, ids)
    h = _gru_scan(p.gru, emb)
    return (h @ p.out_w) + p.out_b


@dataclass
class JointTensor:
    """Per-node output distributions over the (T, U+1, K) lattice.

    Column u is conditioned on tokens y_1..y_u (column 0 on the start
    symbol); the final column exists so the lattice can emit trailing
    blanks after the last token.
    """

    log_probs: Array  # (T, U+1, K)
    temperature: float

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def num_columns(self) -> int:
        return self.log_probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.log_probs.shape[2]


def joint(h_enc: Array, h_pred: Array, p: JointParams, temperature: float = 1.0) -> JointTensor:
    """Combine encoder and prediction states into per-node log distributions."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    t_len = h_enc.shape[0]
    u_len = h_pred.shape[0]
    enc_proj = h_enc @ p.enc_w
    pred_proj = (h_pred @ p.pred_w) + p.bias
    grid = ng.reshape(enc_proj, (t_len, 1, -1)) + ng.reshape(pred_proj, (1, u_len, -1))
    hidden = ng.tanh(ng.reshape(grid, (t_len * u_len, -1)))
    logits = (hidden @ p.out_w) + p.out_b
    log_probs = ng.log_softmax(logits, temperature=temperature)
    k = p.out_w.shape[1]
    return JointTensor(ng.reshape(log_probs, (t_len, u_len, k)), temperature)


def joint_logits_row(enc_proj_row: np.ndarray, pred_proj_row: np.ndarray,
                     p: JointParams) -> np.ndarray:
    """Inference-only single-node logits from precomputed projections."""
    hidden = np.tanh(enc_proj_row + pred_proj_row)
    return hidden @ p.out_w.data + p.out_b.data[0]


def elm_forward(y: TokenSequence, p: ELMParams, vocab: Vocabulary, *,
                full: bool = False) -> Array:
    """Next-token log distributions; row u-1 predicts y_u given y_1..y_{u-1}.

    With ``full`` an extra final row (the eos prediction slot) is appended,
    which language-model training and fusion decoding need.
    """
    y.validate(vocab)
    ids = [vocab.bos_id, *y.ids]
    if not full:
        ids = ids[:len(y)] if len(y) > 0 else []
    if len(ids) == 0:
        return Array(np.zeros((0, vocab.size)))
    emb = ng.embedding(p.embed, ids)
    h = _gru_scan(p.gru, emb)
    logits = (h @ p.out_w) + p.out_b
    return ng.log_softmax(logits)


def ilm_forward(y: TokenSequence, pred: PredictionParams, jnt: JointParams,
                vocab: Vocabulary) -> Array:
    """Internal-LM rows: the joint evaluated with the acoustic input zeroed.

    Uses the live prediction/joint parameters; row u-1 is the distribution
    over y_u given y_1..y_{u-1}. Acoustic inputs never enter.
    """
    u_len = len(y)
    if u_len == 0:
        return Array(np.zeros((0, jnt.out_w.shape[1])))
    h_pred = predict_states(y, pred, vocab)
    rows = h_pred[:u_len, :]
    pred_proj = (rows @ jnt.pred_w) + jnt.bias
    hidden = ng.tanh(pred_proj)
    logits = (hidden @ jnt.out_w) + jnt.out_b
    return ng.log_softmax(logits)
