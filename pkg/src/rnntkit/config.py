"""TOML run configuration with dotted-key overrides.

Sections: [model], [train], [ss], [decode], [corpus], [elm]. Unknown keys
are rejected by name. Overrides use ``section.key=value`` with TOML literal
values, so experiment grids are scriptable without editing files.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib as toml
else:
    import tomli as toml

from .decoding import DecodeConfig
from .models import ModelConfig
from .numgrad import ParameterError
from .sampling import SamplingPolicy
from .training import ElmConfig, TrainConfig


class UsageError(ValueError):
    """Bad command line or configuration input."""


CORPUS_DEFAULTS = {
    "vocab_size": 20,
    "branching": 4,
    "feature_dim": 8,
    "noise": 0.3,
    "utterance_count": 2500,
    "seed": 17,
    "frames_min": 2,
    "frames_max": 4,
    "min_tokens": 3,
    "max_tokens": 10,
}

CORPUS_PRESETS = {
    "default": {},
    "tiny": {"utterance_count": 160, "max_tokens": 6},
}

_SS_DEFAULTS = {
    "level": "off",
    "source": "ilm",
    "lambda": 0.0,
    "seed": 0,
    "rnnt_path": "occupancy",
    "acc_scope": "utterance",
}

_TRAIN_DEFAULTS = {
    "alpha": 0.5,
    "beta": 0.1,
    "warmup_steps": 500,
    "peak_lr": 4e-3,
    "epochs": 8,
    "batch_size": 16,
    "seed": 1,
    "grad_clip": 5.0,
    "feature_mask": False,
    "ss_start_epoch": 0,
    "log_source_acc": ["ilm", "rnnt"],
}

_DECODE_DEFAULTS = {
    "beam": 8,
    "temperature": 1.6,
    "mu_lm": 0.0,
    "mu_ilm": 0.0,
    "length_reward": 0.0,
    "max_expand_factor": 1.0,
    "emit_cap_per_frame": 10,
}

_ELM_DEFAULTS = {
    "epochs": 10,
    "batch_size": 32,
    "peak_lr": 5e-3,
    "warmup_steps": 200,
    "seed": 1,
}

_MODEL_DEFAULTS = {f: getattr(ModelConfig(), f) for f in ModelConfig().__dict__}

_SCHEMA = {
    "model": _MODEL_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
    "ss": _SS_DEFAULTS,
    "decode": _DECODE_DEFAULTS,
    "corpus": CORPUS_DEFAULTS,
    "elm": _ELM_DEFAULTS,
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig
    corpus: dict
    elm: ElmConfig
    resolved: dict  # echo of every section after defaults and overrides


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = toml.loads(f"v = {raw}")["v"]
    except toml.TOMLDecodeError:
        value = raw  # bare string
    return key, value


def _set_dotted(tree: dict, key: str, value: object) -> None:
    parts = key.split(".")
    if len(parts) != 2:
        raise UsageError(f"override key {key!r} must be section.key")
    section, name = parts
    if section not in _SCHEMA:
        raise UsageError(f"unknown config section: {section}")
    if name not in _SCHEMA[section]:
        raise UsageError(f"unknown config key: {section}.{name}")
    tree.setdefault(section, {})[name] = value


def _validate_tree(tree: dict) -> None:
    for section, body in tree.items():
        if section not in _SCHEMA:
            raise UsageError(f"unknown config section: {section}")
        if not isinstance(body, dict):
            raise UsageError(f"config section {section} must be a table")
        for name in body:
            if name not in _SCHEMA[section]:
                raise UsageError(f"unknown config key: {section}.{name}")


def load_config(path: Path | str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    tree: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            tree = toml.load(fh)
        _validate_tree(tree)
    for text in overrides or []:
        key, value = _parse_override(text)
        _set_dotted(tree, key, value)

    resolved = {section: dict(defaults) for section, defaults in _SCHEMA.items()}
    for section, body in tree.items():
        resolved[section].update(body)

    try:
        model = ModelConfig(**resolved["model"])
        ss = resolved["ss"]
        policy = SamplingPolicy(level=ss["level"], source=ss["source"],
                                lam=ss["lambda"], rng_seed=ss["seed"],
                                rnnt_path=ss["rnnt_path"], acc_scope=ss["acc_scope"])
        tr = dict(resolved["train"])
        tr["log_source_acc"] = tuple(tr["log_source_acc"])
        train = TrainConfig(policy=policy, **tr)
        decode = DecodeConfig(**resolved["decode"])
        elm = ElmConfig(**resolved["elm"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    return RunConfig(model, train, decode, dict(resolved["corpus"]), elm, resolved)
