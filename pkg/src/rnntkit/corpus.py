"""Synthetic corpus generation, dataset file I/O, and error metrics.

Utterances pair a token sequence drawn from a sparse bigram language model
with feature frames built from per-token prototype vectors, each repeated
for a random duration and perturbed by Gaussian noise. The noise default
leaves a trained baseline with low but nonzero error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numgrad import ContractError, ParameterError
from .models import AcousticSequence, TokenSequence, Vocabulary

SPLIT_NAMES = ("train", "dev", "test")


@dataclass
class SynthSpec:
    """Generator settings; transition rows and the start vector sum to 1."""

    vocab_size: int
    transitions: np.ndarray  # (V, V)
    start: np.ndarray  # (V,)
    frames_per_token: tuple[int, int]
    feature_dim: int
    noise: float
    utterance_count: int
    seed: int
    min_tokens: int = 3
    max_tokens: int = 10

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        v = self.vocab_size
        if self.transitions.shape != (v, v):
            raise ParameterError(f"transition matrix must be ({v}, {v})")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-9):
            raise ParameterError("transition rows must sum to 1")
        if not np.isclose(self.start.sum(), 1.0, atol=1e-9):
            raise ParameterError("start distribution must sum to 1")
        if self.frames_per_token[0] < 1:
            raise ParameterError("frames-per-token minimum is 1")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ParameterError("need 1 <= min_tokens <= max_tokens")


def default_spec(vocab_size: int = 20, branching: int = 4, feature_dim: int = 8,
                 noise: float = 0.3, utterance_count: int = 2500, seed: int = 17,
                 frames_per_token: tuple[int, int] = (2, 4),
                 min_tokens: int = 3, max_tokens: int = 10) -> SynthSpec:
    """Sparse random bigram structure derived from the seed.

    Each token allows only ``branching`` successors with peaked Dirichlet
    weights, so the corpus has forbidden bigrams and a language model that
    is genuinely predictive (next-token argmax accuracy around 0.5) without
    being deterministic. A flat LM starves the sampling sources of signal.
    """
    if not 1 <= branching <= vocab_size:
        raise ParameterError("branching must lie in [1, vocab_size]")
    rng = np.random.default_rng([seed, 101])
    transitions = np.zeros((vocab_size, vocab_size))
    for v in range(vocab_size):
        successors = rng.permutation(vocab_size)[:branching]
        transitions[v, successors] = rng.dirichlet([0.5] * branching)
    start = np.full(vocab_size, 1.0 / vocab_size)
    return SynthSpec(vocab_size, transitions, start, frames_per_token,
                     feature_dim, noise, utterance_count, seed,
                     min_tokens, max_tokens)


@dataclass
class Utterance:
    id: str
    acoustic: AcousticSequence
    reference: TokenSequence

    def __post_init__(self):
        if len(self.reference) == 0:
            raise ContractError(f"utterance {self.id} has an empty reference")


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: dict[str, list[Utterance]]

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]


def token_prototypes(spec: SynthSpec) -> np.ndarray:
    """(V, F) prototype vectors, deterministic in the spec seed."""
    rng = np.random.default_rng([spec.seed, 202])
    return rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.feature_dim))


def generate(spec: SynthSpec) -> Dataset:
    """Sample the corpus and partition it 80/10/10 by a seed-derived shuffle."""
    vocab = Vocabulary.from_content([f"t{i:02d}" for i in range(spec.vocab_size)])
    protos = token_prototypes(spec)
    content = vocab.content_ids
    utts = []
    for i in range(spec.utterance_count):
        rng = np.random.default_rng([spec.seed, 303, i])
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        toks = [int(rng.choice(spec.vocab_size, p=spec.start))]
        for _ in range(length - 1):
            toks.append(int(rng.choice(spec.vocab_size, p=spec.transitions[toks[-1]])))
        frames = []
        fmin, fmax = spec.frames_per_token
        for tok in toks:
            dur = int(rng.integers(fmin, fmax + 1))
            block = protos[tok] + spec.noise * rng.normal(size=(dur, spec.feature_dim))
            frames.append(block)
        utts.append(Utterance(
            id=f"utt{i:05d}",
            acoustic=AcousticSequence(np.concatenate(frames, axis=0)),
            reference=TokenSequence(content[t] for t in toks),
        ))

    order = np.random.default_rng([spec.seed, 404]).permutation(spec.utterance_count)
    n_train = int(round(spec.utterance_count * 0.8))
    n_dev = int(round(spec.utterance_count * 0.1))
    picks = {
        "train": sorted(order[:n_train].tolist()),
        "dev": sorted(order[n_train:n_train + n_dev].tolist()),
        "test": sorted(order[n_train + n_dev:].tolist()),
    }
    splits = {name: [utts[i] for i in idx] for name, idx in picks.items()}
    return Dataset(vocab, splits)


# ---------------------------------------------------------------------------
# dataset files: manifest JSON lines + raw float32 feature files
# ---------------------------------------------------------------------------
#
# Feature file layout: two little-endian uint32 (frame count T', feature dim
# F) followed by T'*F little-endian float32 values in row-major order.


def write_feature_file(path: Path, frames: np.ndarray) -> None:
    t_len, fdim = frames.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", t_len, fdim))
        fh.write(frames.astype("<f4").tobytes())


def read_feature_file(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        t_len, fdim = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * t_len * fdim), dtype="<f4")
    return data.reshape(t_len, fdim).astype(np.float64)


def write_dataset(dataset: Dataset, outdir: Path) -> None:
    outdir = Path(outdir)
    (outdir / "features").mkdir(parents=True, exist_ok=True)
    with open(outdir / "vocab.json", "w") as fh:
        json.dump(dataset.vocab.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    for split in SPLIT_NAMES:
        with open(outdir / f"manifest.{split}.jsonl", "w") as fh:
            for utt in dataset.splits[split]:
                rel = f"features/{utt.id}.bin"
                write_feature_file(outdir / rel, utt.acoustic.frames)
                tokens = " ".join(dataset.vocab.tokens[t] for t in utt.reference)
                fh.write(json.dumps({"features": rel, "id": utt.id,
                                     "tokens": tokens}, sort_keys=True))
                fh.write("\n")


def read_dataset(indir: Path, splits: tuple[str, ...] = SPLIT_NAMES) -> Dataset:
    indir = Path(indir)
    with open(indir / "vocab.json") as fh:
        vocab = Vocabulary.from_dict(json.load(fh))
    by_name = {name: i for i, name in enumerate(vocab.tokens)}
    out: dict[str, list[Utterance]] = {}
    for split in splits:
        utts = []
        with open(indir / f"manifest.{split}.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                frames = read_feature_file(indir / rec["features"])
                ref = TokenSequence(by_name[t] for t in rec["tokens"].split())
                utts.append(Utterance(rec["id"], AcousticSequence(frames), ref))
        out[split] = utts
    return Dataset(vocab, out)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditStats:
    subs: int
    ins: int
    dels: int

    @property
    def total(self) -> int:
        return self.subs + self.ins + self.dels


def edit_distance(hyp: TokenSequence, ref: TokenSequence) -> EditStats:
    """Levenshtein alignment minimizing S+I+D; ties prefer substitutions,
    then deletions."""
    m, n = len(hyp), len(ref)
    # cell: (total, subs, ins, dels); hyp indexes rows, ref indexes columns
    prev = [(j, 0, 0, j) for j in range(n + 1)]
    for i in range(1, m + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, n + 1):
            if hyp[i - 1] == ref[j - 1]:
                cur.append(prev[j - 1])
                continue
            t_s, s_s, i_s, d_s = prev[j - 1]
            t_d, s_d, i_d, d_d = cur[j - 1]
            t_i, s_i, i_i, d_i = prev[j]
            best = (t_s + 1, s_s + 1, i_s, d_s)
            if t_d + 1 < best[0]:
                best = (t_d + 1, s_d, i_d, d_d + 1)
            if t_i + 1 < best[0]:
                best = (t_i + 1, s_i, i_i + 1, d_i)
            cur.append(best)
        prev = cur
    total, subs, ins, dels = prev[n]
    return EditStats(subs, ins, dels)


def error_rate(pairs: list[tuple[TokenSequence, TokenSequence]]) -> float:
    """Corpus-level (S+I+D) / reference length over (hyp, ref) pairs."""
    errors = 0
    ref_len = 0
    for hyp, ref in pairs:
        stats = edit_distance(hyp, ref)
        errors += stats.total
        ref_len += len(ref)
    if ref_len == 0:
        raise ContractError("reference corpus is empty")
    return errors / ref_len
