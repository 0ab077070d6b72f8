"""Command-line interface: generate, pretrain-elm, train, decode, eval,
lattice-inspect, sweep.

Every run writes a resolved-config echo plus a version stamp into its output
directory. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path


from . import __version__
from . import checkpoint as ckpt
from . import corpus as cps
from . import decoding, lattice, training
from .config import CORPUS_PRESETS, RunConfig, UsageError, load_config
from .models import TokenSequence, joint, predict_states, encode
from .numgrad import ContractError, ParameterError
from .training import TrainingDiverged


def _stamp(outdir: Path, cfg: RunConfig) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {"version": __version__, "config": cfg.resolved}
    (outdir / "config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _load_cfg(args: argparse.Namespace) -> RunConfig:
    try:
        return load_config(args.config, args.set)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc


def spec_from_corpus_section(c: dict) -> cps.SynthSpec:
    return cps.default_spec(
        vocab_size=c["vocab_size"], branching=c["branching"],
        feature_dim=c["feature_dim"], noise=c["noise"],
        utterance_count=c["utterance_count"], seed=c["seed"],
        frames_per_token=(c["frames_min"], c["frames_max"]),
        min_tokens=c["min_tokens"], max_tokens=c["max_tokens"])


def cmd_generate(args: argparse.Namespace) -> int:
    if args.spec not in CORPUS_PRESETS:
        raise UsageError(f"unknown corpus preset {args.spec!r}; "
                         f"choose from {sorted(CORPUS_PRESETS)}")
    # precedence: config file < preset < explicit --set overrides
    preset = [f"corpus.{k}={v}" for k, v in CORPUS_PRESETS[args.spec].items()]
    args.set = preset + args.set
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    spec = spec_from_corpus_section(cfg.corpus)
    dataset = cps.generate(spec)
    cps.write_dataset(dataset, outdir)
    _stamp(outdir, cfg)
    sizes = {name: len(dataset.splits[name]) for name in cps.SPLIT_NAMES}
    print(f"wrote dataset to {outdir}: " +
          ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return 0


def cmd_pretrain_elm(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    dataset = cps.read_dataset(Path(args.data))
    train_txt = [u.reference for u in dataset["train"]]
    dev_txt = [u.reference for u in dataset["dev"]]
    outdir.mkdir(parents=True, exist_ok=True)
    params, records = training.pretrain_elm(
        train_txt, dev_txt, cfg.elm, cfg.model, dataset.vocab,
        metrics_path=outdir / "elm_metrics.jsonl")
    ckpt.save_elm(outdir / "elm.ckpt", params, dataset.vocab, cfg.model)
    _stamp(outdir, cfg)
    last = records[-1]
    print(f"pretrained ELM: dev ppl {last['dev_ppl']:.3f} "
          f"-> {outdir / 'elm.ckpt'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    dataset = cps.read_dataset(Path(args.data))
    elm = None
    if args.elm:
        elm, elm_vocab, _, _ = ckpt.load_elm(Path(args.elm))
        if elm_vocab.tokens != dataset.vocab.tokens:
            raise ContractError("ELM vocabulary does not match the dataset")
    _stamp(outdir, cfg)
    result = training.train(dataset, cfg.train, cfg.model, outdir, elm=elm,
                            resume=Path(args.resume) if args.resume else None)
    print(f"trained {result.steps} steps: best dev error "
          f"{result.best_dev_error:.4f}, final {result.final_dev_error:.4f}")
    print(f"checkpoints: {result.best_path}, {result.last_path}")
    return 0


def _decode_split(args: argparse.Namespace, cfg: RunConfig):
    dataset = cps.read_dataset(Path(args.data), splits=(args.split,))
    params, vocab, _, _ = ckpt.load_rnnt(Path(args.model))
    if vocab.tokens != dataset.vocab.tokens:
        raise ContractError("model vocabulary does not match the dataset")
    elm = None
    if getattr(args, "elm", None):
        elm, _, _, _ = ckpt.load_elm(Path(args.elm))
    lines = []
    pairs = []
    for utt in dataset[args.split]:
        hyps = decoding.beam_decode(utt.acoustic, params, vocab, cfg.decode, elm=elm)
        best = hyps[0]
        hyp_seq = TokenSequence(best.tokens)
        stats = cps.edit_distance(hyp_seq, utt.reference)
        pairs.append((hyp_seq, utt.reference))
        lines.append({
            "utt_id": utt.id,
            "hypothesis": " ".join(vocab.tokens[t] for t in best.tokens),
            "reference": " ".join(vocab.tokens[t] for t in utt.reference),
            "scores": {
                "combined": best.combined,
                "rnnt": best.score_rnnt,
                "lm": best.score_lm,
                "ilm": best.score_ilm,
                "length": len(best.tokens),
            },
            "edit_ops": {"subs": stats.subs, "ins": stats.ins, "dels": stats.dels},
        })
    return lines, pairs


def cmd_decode(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    lines, _ = _decode_split(args, cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"decoded.{args.split}.jsonl"
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    _stamp(outdir, cfg)
    print(f"decoded {len(lines)} utterances -> {path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    lines, pairs = _decode_split(args, cfg)
    rate = cps.error_rate(pairs)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"decoded.{args.split}.jsonl"
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    (outdir / f"eval.{args.split}.json").write_text(json.dumps(
        {"split": args.split, "token_error_rate": rate,
         "utterances": len(lines)}, sort_keys=True, indent=1) + "\n")
    _stamp(outdir, cfg)
    print(f"{args.split} token error rate: {rate:.4f} over {len(lines)} utterances")
    return 0


def cmd_lattice_inspect(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    dataset = cps.read_dataset(Path(args.data), splits=(args.split,))
    params, vocab, _, _ = ckpt.load_rnnt(Path(args.model))
    match = [u for u in dataset[args.split] if u.id == args.utt]
    if not match:
        raise UsageError(f"utterance {args.utt!r} not found in split {args.split}")
    utt = match[0]
    h_enc = encode(utt.acoustic, params.encoder)
    h_pred = predict_states(utt.reference, params.prediction, vocab)
    jt = joint(h_enc, h_pred, params.joint)
    report = lattice.lattice_report(jt, utt.reference, vocab.blank_id)
    report["utt_id"] = utt.id
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote lattice report for {utt.id} -> {args.out}")
    else:
        print(text)
    return 0


TOKEN_GRID = (0.05, 0.15, 0.25)
UTTERANCE_GRID = (0.15, 0.25, 0.5)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    dataset = cps.read_dataset(Path(args.data))
    elm = None
    if args.elm:
        elm, _, _, _ = ckpt.load_elm(Path(args.elm))
    grids = []
    if args.level in ("token", "both"):
        grids.extend(("token", lam) for lam in TOKEN_GRID)
    if args.level in ("utterance", "both"):
        grids.extend(("utterance", lam) for lam in UTTERANCE_GRID)
    rows = []
    for level, lam in grids:
        policy = replace(cfg.train.policy, level=level, source=args.source, lam=lam)
        tcfg = replace(cfg.train, policy=policy)
        rundir = outdir / f"{level}_{args.source}_lam{lam:g}"
        result = training.train(dataset, tcfg, cfg.model, rundir, elm=elm)
        rows.append({"level": level, "source": args.source, "lambda": lam,
                     "dev_error": result.final_dev_error,
                     "best_dev_error": result.best_dev_error})
        print(f"{level:9s} {args.source:4s} lambda={lam:<5g} "
              f"dev_error={result.final_dev_error:.4f}")
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n")
    _stamp(outdir, cfg)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="rnntkit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key config override, e.g. ss.lambda=0.5")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default="default", help="corpus preset (default, tiny)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain-elm", help="train the external LM on transcripts")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_elm)

    p = sub.add_parser("train", help="train the transducer")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--elm", default=None, help="ELM checkpoint for ss.source=elm")
    p.add_argument("--resume", default=None, help="training-state checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-decode a split to JSON lines")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--elm", default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="decode a split and report the error rate")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--elm", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lattice-inspect", help="dump lattice variables for one utterance")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--utt", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_lattice_inspect)

    p = sub.add_parser("sweep", help="run the lambda grids and tabulate dev error")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="ilm", choices=("elm", "ilm", "rnnt"))
    p.add_argument("--level", default="both", choices=("token", "utterance", "both"))
    p.add_argument("--elm", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 1
    except (ContractError, TrainingDiverged, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
