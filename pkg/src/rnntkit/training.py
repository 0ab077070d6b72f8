"""Combined-loss training with scheduled sampling applied to the prediction
network input.

Per utterance: the sampling policy runs in inference mode on the original
tokens to produce Y'; the prediction network consumes Y'; the transducer,
CTC, and internal-LM losses are all computed against the original tokens.
All randomness is derived statelessly from (seed, epoch, utterance index),
so runs are reproducible and resumable bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import numgrad as ng
from . import sampling as smp
from .corpus import Dataset, Utterance, error_rate
from .decoding import greedy_decode
from .lattice import ctc_min_frames, ctc_loss, rnnt_loss
from .models import (AcousticSequence, ELMParams, ModelConfig, RNNTParams,
                     TokenSequence, Vocabulary, elm_arrays, elm_forward,
                     elm_named, encode, init_elm, init_rnnt, joint,
                     predict_states, recording)
from .numgrad import Array, ContractError, ParameterError, Tape
from .sampling import SamplingPolicy

logger = logging.getLogger("rnntkit")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; names the offending utterance."""


@dataclass
class TrainConfig:
    alpha: float = 0.5  # CTC weight
    beta: float = 0.1  # ILM weight
    policy: SamplingPolicy = field(default_factory=SamplingPolicy)
    warmup_steps: int = 500
    peak_lr: float = 4e-3
    epochs: int = 8
    batch_size: int = 16
    seed: int = 1
    grad_clip: float = 5.0
    feature_mask: bool = False
    ss_start_epoch: int = 0
    log_source_acc: tuple[str, ...] = ("ilm", "rnnt")

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.warmup_steps < 1:
            raise ParameterError("warmup_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")


@dataclass
class ElmConfig:
    epochs: int = 10
    batch_size: int = 32
    peak_lr: float = 5e-3
    warmup_steps: int = 200
    seed: int = 1


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then inverse square-root decay."""
    if step < 1:
        raise ParameterError("steps are 1-based")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    count: int = 0


def adam_init(named: dict[str, Array]) -> AdamState:
    return AdamState(m={k: np.zeros_like(a.data) for k, a in named.items()},
                     v={k: np.zeros_like(a.data) for k, a in named.items()})


def adam_step(named: dict[str, Array], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, grad_clip: float) -> float:
    """In-place update; returns the pre-clip global gradient norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    scale = 1.0 if norm <= grad_clip or norm == 0.0 else grad_clip / norm
    state.count += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.count
    bc2 = 1.0 - ADAM_BETA2 ** state.count
    for name, arr in named.items():
        g = grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        arr.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return norm


def mask_features(frames: np.ndarray, rng: np.random.Generator,
                  max_time_blocks: int = 2, max_feat_blocks: int = 2) -> np.ndarray:
    """Zero out a few time and feature blocks; a light SpecAugment stand-in."""
    out = frames.copy()
    t_len, fdim = out.shape
    for _ in range(int(rng.integers(0, max_time_blocks + 1))):
        width = int(rng.integers(1, max(2, t_len // 8 + 1)))
        start = int(rng.integers(0, max(1, t_len - width + 1)))
        out[start:start + width, :] = 0.0
    for _ in range(int(rng.integers(0, max_feat_blocks + 1))):
        width = int(rng.integers(1, max(2, fdim // 4 + 1)))
        start = int(rng.integers(0, max(1, fdim - width + 1)))
        out[:, start:start + width] = 0.0
    return out


@dataclass
class LossBreakdown:
    total: float
    rnnt: float
    ctc: float
    ilm: float


@dataclass
class StepStats:
    utterances: int
    positions: int
    replaced_events: int
    replaced_positions: int
    acc_values: list[float]
    source_acc: dict[str, list[float]]
    skipped: list[str]
    per_utt_loss: list[tuple[str, float]]

    @property
    def replacement_rate(self) -> float:
        if self.positions == 0 or self.utterances == 0:
            return 0.0
        # token level counts positions, utterance level counts whole swaps
        if self.replaced_positions and not self.replaced_events:
            return self.replaced_positions / self.positions
        return self.replaced_events / self.utterances


def _enc_frames_after_downsample(utt: Utterance, stride: int) -> int:
    return (utt.acoustic.num_frames - 1) // stride + 1


def combined_loss(batch: list[tuple[int, Utterance]], params: RNNTParams,
                  vocab: Vocabulary, cfg: TrainConfig, elm: ELMParams | None = None,
                  epoch: int = 0) -> tuple[LossBreakdown, dict[str, np.ndarray], StepStats]:
    """One batch forward/backward; returns the loss parts, gradients by
    parameter name, and sampling statistics.

    Utterances whose encoder output is too short for their CTC expansion are
    skipped with a warning (only when the CTC weight is active).
    """
    policy = cfg.policy
    active = policy.level != "off" and epoch >= cfg.ss_start_epoch

    kept: list[tuple[int, Utterance]] = []
    skipped: list[str] = []
    for idx, utt in batch:
        if cfg.alpha > 0 and _enc_frames_after_downsample(utt, params.encoder.stride) \
                < ctc_min_frames(utt.reference):
            logger.warning("skipping %s: too short for its CTC expansion", utt.id)
            skipped.append(utt.id)
            continue
        kept.append((idx, utt))
    if not kept:
        raise ContractError("batch has no trainable utterances")

    # inference-mode phase: feature masking, sampling matrices, proficiency
    prepared = []
    for idx, utt in kept:
        frames = utt.acoustic.frames
        if cfg.feature_mask:
            frames = mask_features(frames, np.random.default_rng([cfg.seed, 31, epoch, idx]))
        acoustic = AcousticSequence(frames)
        rows = {}
        wanted = set(src for src in cfg.log_source_acc
                     if src != "elm" or elm is not None)
        if active:
            wanted.add(policy.source)
        for src in sorted(wanted):
            rows[src] = smp.build_sampling_matrix(
                src, utt.reference, vocab, rnnt=params, elm=elm,
                acoustic=acoustic, rnnt_path=policy.rnnt_path)
        prepared.append((idx, utt, acoustic, rows))

    source_acc: dict[str, list[float]] = {}
    for idx, utt, _, rows in prepared:
        for src, mat in rows.items():
            picks = smp.blank_suppressed_argmax(mat.log_probs, vocab.blank_id)
            acc = smp.proficiency(TokenSequence(picks), utt.reference)
            source_acc.setdefault(src, []).append(acc)

    acc_override = None
    if active and policy.level == "utterance" and policy.acc_scope == "minibatch":
        batch_accs = source_acc.get(policy.source, [])
        acc_override = sum(batch_accs) / len(batch_accs) if batch_accs else 0.0

    outcomes = []
    for idx, utt, acoustic, rows in prepared:
        if active:
            rng = smp.utterance_rng(policy.rng_seed, epoch, idx)
            outcome = smp.apply_policy(policy, utt.reference, rows.get(policy.source),
                                       rng, vocab.blank_id, acc_override)
        else:
            outcome = smp.SampleOutcome(utt.reference, (), None, ())
        outcomes.append((idx, utt, acoustic, outcome))

    # recorded phase: losses against the original tokens
    tape = Tape()
    loss_terms = []
    sums = {"rnnt": 0.0, "ctc": 0.0, "ilm": 0.0}
    per_utt_loss = []
    with recording(params.arrays(), tape):
        for idx, utt, acoustic, outcome in outcomes:
            y = utt.reference
            h_enc = encode(acoustic, params.encoder)
            h_pred = predict_states(outcome.y_prime, params.prediction, vocab)
            jt = joint(h_enc, h_pred, params.joint)
            l_rnnt, _ = rnnt_loss(jt, y, vocab.blank_id)
            utt_loss = l_rnnt
            sums["rnnt"] += l_rnnt.item()
            if cfg.alpha > 0:
                ctc_lp = ng.log_softmax((h_enc @ params.ctc_w) + params.ctc_b)
                l_ctc = ctc_loss(ctc_lp, y, vocab.blank_id)
                utt_loss = utt_loss + cfg.alpha * l_ctc
                sums["ctc"] += l_ctc.item()
            if cfg.beta > 0:
                u_len = len(y)
                pred_proj = (h_pred[:u_len, :] @ params.joint.pred_w) + params.joint.bias
                ilm_rows = ng.log_softmax((ng.tanh(pred_proj) @ params.joint.out_w)
                                          + params.joint.out_b)
                l_ilm = -ng.reduce_sum(ng.pick(ilm_rows, list(y.ids)))
                utt_loss = utt_loss + cfg.beta * l_ilm
                sums["ilm"] += l_ilm.item()
            loss_terms.append(utt_loss)
            per_utt_loss.append((utt.id, utt_loss.item()))
        total = loss_terms[0]
        for term in loss_terms[1:]:
            total = total + term
        total = total * (1.0 / len(loss_terms))
        grads_view = ng.backward(total, tape)

    named = params.named()
    grads = {name: grads_view[arr] for name, arr in named.items()}

    n = len(outcomes)
    stats = StepStats(
        utterances=n,
        positions=sum(len(utt.reference) for _, utt, _, _ in outcomes),
        replaced_events=sum(1 for _, _, _, o in outcomes
                            if o.replaced and policy.level == "utterance"),
        replaced_positions=sum(len(o.replaced_positions) for _, _, _, o in outcomes
                               if policy.level == "token"),
        acc_values=[o.acc_value for _, _, _, o in outcomes if o.acc_value is not None],
        source_acc=source_acc,
        skipped=skipped,
        per_utt_loss=per_utt_loss,
    )
    breakdown = LossBreakdown(total=total.item(), rnnt=sums["rnnt"] / n,
                              ctc=sums["ctc"] / n, ilm=sums["ilm"] / n)
    return breakdown, grads, stats


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_dev_error: float
    final_dev_error: float
    steps: int
    best_path: Path
    last_path: Path
    metrics_path: Path


def _make_batches(utts: list[Utterance], batch_size: int) -> list[list[tuple[int, Utterance]]]:
    """Bucket by acoustic length; batch membership is fixed across epochs."""
    indexed = list(enumerate(utts))
    indexed.sort(key=lambda p: (p[1].acoustic.num_frames, p[1].id))
    return [indexed[i:i + batch_size] for i in range(0, len(indexed), batch_size)]


def _acc_hist(values: list[float], bins: int = 10) -> list[int]:
    hist = [0] * bins
    for v in values:
        hist[min(int(v * bins), bins - 1)] += 1
    return hist


def _dev_error(params: RNNTParams, vocab: Vocabulary, dev: list[Utterance]) -> float:
    pairs = [(greedy_decode(u.acoustic, params, vocab), u.reference) for u in dev]
    return error_rate(pairs)


def train(dataset: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
          outdir: Path, elm: ELMParams | None = None,
          resume: Path | None = None) -> TrainResult:
    """Full training run; writes metrics JSON lines plus best/last/state
    checkpoints under ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    vocab = dataset.vocab
    if cfg.policy.level != "off" and cfg.policy.source == "elm" and elm is None:
        raise ContractError("policy samples from the ELM but none was given")

    state_path = outdir / "state.ckpt"
    best_path = outdir / "best.ckpt"
    last_path = outdir / "last.ckpt"
    metrics_path = outdir / "metrics.jsonl"

    if resume is not None:
        params, adam, step, start_epoch, best = _load_train_state(resume, model_cfg)
        metrics = open(metrics_path, "a")
    else:
        params = init_rnnt(model_cfg, vocab, np.random.default_rng([cfg.seed, 11]))
        adam = adam_init(params.named())
        step = 0
        start_epoch = 0
        best = math.inf
        metrics = open(metrics_path, "w")

    policy = cfg.policy
    batches = _make_batches(dataset["train"], cfg.batch_size)
    result_best = best
    dev_err = math.inf
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, 13, epoch]).permutation(len(batches))
            ep_losses: list[float] = []
            ep_positions = 0
            ep_replaced_positions = 0
            ep_utts = 0
            ep_replaced_events = 0
            ep_acc: list[float] = []
            ep_source_acc: dict[str, list[float]] = {}
            for b in order:
                step += 1
                lr = lr_schedule(step, cfg)
                breakdown, grads, stats = combined_loss(
                    batches[b], params, vocab, cfg, elm=elm, epoch=epoch)
                if not math.isfinite(breakdown.total):
                    bad = [uid for uid, lv in stats.per_utt_loss if not math.isfinite(lv)]
                    metrics.write(json.dumps({"type": "abort", "step": step,
                                              "utterances": bad}) + "\n")
                    metrics.flush()
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}, utterance(s): {', '.join(bad) or '?'}")
                adam_step(params.named(), grads, adam, lr, cfg.grad_clip)
                ep_losses.append(breakdown.total)
                ep_positions += stats.positions
                ep_replaced_positions += stats.replaced_positions
                ep_utts += stats.utterances
                ep_replaced_events += stats.replaced_events
                ep_acc.extend(stats.acc_values)
                for src, vals in stats.source_acc.items():
                    ep_source_acc.setdefault(src, []).extend(vals)
                metrics.write(json.dumps({
                    "type": "step", "step": step, "epoch": epoch, "lr": lr,
                    "loss": breakdown.total, "loss_rnnt": breakdown.rnnt,
                    "loss_ctc": breakdown.ctc, "loss_ilm": breakdown.ilm,
                    "replacement_rate": stats.replacement_rate,
                    "acc_hist": _acc_hist(stats.acc_values),
                    "skipped": stats.skipped,
                    "policy": {"level": policy.level, "source": policy.source,
                               "lambda": policy.lam},
                }, sort_keys=True) + "\n")

            dev_err = _dev_error(params, vocab, dataset["dev"])
            if policy.level == "token":
                rate = ep_replaced_positions / ep_positions if ep_positions else 0.0
            else:
                rate = ep_replaced_events / ep_utts if ep_utts else 0.0
            record = {
                "type": "epoch", "epoch": epoch, "steps": step,
                "train_loss": sum(ep_losses) / len(ep_losses),
                "dev_error": dev_err,
                "replacement_rate": rate,
                "mean_acc": sum(ep_acc) / len(ep_acc) if ep_acc else None,
                "source_acc": {src: sum(v) / len(v)
                               for src, v in sorted(ep_source_acc.items())},
            }
            metrics.write(json.dumps(record, sort_keys=True) + "\n")
            metrics.flush()
            ckpt.save_rnnt(last_path, params, vocab, model_cfg,
                           {"epoch": epoch, "step": step, "dev_error": dev_err})
            if dev_err < result_best:
                result_best = dev_err
                ckpt.save_rnnt(best_path, params, vocab, model_cfg,
                               {"epoch": epoch, "step": step, "dev_error": dev_err})
            _save_train_state(state_path, params, vocab, model_cfg, adam,
                              step, epoch, result_best)
    finally:
        metrics.close()

    final_dev = dev_err if math.isfinite(dev_err) \
        else _dev_error(params, vocab, dataset["dev"])
    if not best_path.exists():
        ckpt.save_rnnt(best_path, params, vocab, model_cfg, {"epoch": cfg.epochs - 1,
                                                             "step": step,
                                                             "dev_error": final_dev})
    return TrainResult(result_best, final_dev, step, best_path, last_path, metrics_path)


def _save_train_state(path: Path, params: RNNTParams, vocab: Vocabulary,
                      model_cfg: ModelConfig, adam: AdamState, step: int,
                      epoch: int, best: float) -> None:
    arrays: dict[str, np.ndarray] = {k: a.data for k, a in params.named().items()}
    for k, m in adam.m.items():
        arrays[f"adam.m.{k}"] = m
    for k, v in adam.v.items():
        arrays[f"adam.v.{k}"] = v
    ckpt.save_checkpoint(path, arrays, vocab, model_cfg.to_dict(),
                         {"kind": "train_state", "step": step, "epoch": epoch,
                          "best_dev": best, "adam_count": adam.count})


def _load_train_state(path: Path, model_cfg: ModelConfig):
    data = ckpt.load_checkpoint(Path(path))
    if data.metadata.get("kind") != "train_state":
        raise ContractError(f"{path} is not a training state checkpoint")
    if data.config != model_cfg.to_dict():
        raise ContractError("model configuration changed since the checkpoint")
    params = _params_from_arrays(data.arrays, model_cfg)
    named = params.named()
    adam = AdamState(
        m={k: data.arrays[f"adam.m.{k}"].copy() for k in named},
        v={k: data.arrays[f"adam.v.{k}"].copy() for k in named},
        count=int(data.metadata["adam_count"]),
    )
    return params, adam, int(data.metadata["step"]), \
        int(data.metadata["epoch"]) + 1, float(data.metadata["best_dev"])


def _params_from_arrays(arrays: dict[str, np.ndarray], model_cfg: ModelConfig) -> RNNTParams:
    from .checkpoint import _gru_from
    from .models import EncoderParams, JointParams, PredictionParams
    encoder = EncoderParams(
        conv_w=Array(arrays["enc.conv_w"]), conv_b=Array(arrays["enc.conv_b"]),
        layers=[_gru_from(arrays, f"enc.gru{i}") for i in range(model_cfg.enc_layers)],
        out_w=Array(arrays["enc.out_w"]), out_b=Array(arrays["enc.out_b"]),
        stride=model_cfg.downsample, kernel=model_cfg.conv_kernel,
    )
    prediction = PredictionParams(
        embed=Array(arrays["pred.embed"]), gru=_gru_from(arrays, "pred.gru"),
        out_w=Array(arrays["pred.out_w"]), out_b=Array(arrays["pred.out_b"]),
    )
    jnt = JointParams(
        enc_w=Array(arrays["joint.enc_w"]), pred_w=Array(arrays["joint.pred_w"]),
        bias=Array(arrays["joint.bias"]), out_w=Array(arrays["joint.out_w"]),
        out_b=Array(arrays["joint.out_b"]),
    )
    return RNNTParams(encoder, prediction, jnt,
                      ctc_w=Array(arrays["ctc.w"]), ctc_b=Array(arrays["ctc.b"]))


# ---------------------------------------------------------------------------
# language-model pretraining
# ---------------------------------------------------------------------------


def pretrain_elm(transcripts: list[TokenSequence], dev: list[TokenSequence],
                 cfg: ElmConfig, model_cfg: ModelConfig, vocab: Vocabulary,
                 metrics_path: Path | None = None) -> tuple[ELMParams, list[dict]]:
    """Cross-entropy training on transcripts only; logs dev perplexity."""
    if not transcripts:
        raise ContractError("no transcripts to train on")
    params = init_elm(model_cfg, vocab, np.random.default_rng([cfg.seed, 21]))
    named = elm_named(params)
    arrays = elm_arrays(params)
    adam = adam_init(named)
    batches = [list(range(len(transcripts)))[i:i + cfg.batch_size]
               for i in range(0, len(transcripts), cfg.batch_size)]
    records = []
    step = 0
    sched = TrainConfig(warmup_steps=cfg.warmup_steps, peak_lr=cfg.peak_lr,
                        seed=cfg.seed)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 23, epoch]).permutation(len(batches))
        losses = []
        for b in order:
            step += 1
            lr = lr_schedule(step, sched)
            tape = Tape()
            with recording(arrays, tape):
                nll_terms = []
                n_tokens = 0
                for i in batches[b]:
                    y = transcripts[i]
                    rows = elm_forward(y, params, vocab, full=True)
                    targets = [*y.ids, vocab.eos_id]
                    nll_terms.append(-ng.reduce_sum(ng.pick(rows, targets)))
                    n_tokens += len(targets)
                total = nll_terms[0]
                for term in nll_terms[1:]:
                    total = total + term
                total = total * (1.0 / n_tokens)
                grads_view = ng.backward(total, tape)
            grads = {k: grads_view[a] for k, a in named.items()}
            adam_step(named, grads, adam, lr, grad_clip=5.0)
            losses.append(total.item())
        dev_ce = elm_cross_entropy(params, dev, vocab) if dev else None
        records.append({"type": "elm_epoch", "epoch": epoch,
                        "train_ce": sum(losses) / len(losses),
                        "dev_ce": dev_ce,
                        "dev_ppl": math.exp(dev_ce) if dev_ce is not None else None})
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return params, records


def elm_cross_entropy(params: ELMParams, transcripts: list[TokenSequence],
                      vocab: Vocabulary) -> float:
    """Mean per-token negative log-likelihood, eos included."""
    nll = 0.0
    count = 0
    for y in transcripts:
        rows = elm_forward(y, params, vocab, full=True).data
        targets = [*y.ids, vocab.eos_id]
        nll -= sum(rows[u, t] for u, t in enumerate(targets))
        count += len(targets)
    return nll / count
