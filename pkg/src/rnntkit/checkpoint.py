"""Binary checkpoint container.

Layout, all little-endian:

  bytes 0-3    magic "RKT1"
  bytes 4-7    uint32 format version (currently 1)
  bytes 8-15   uint64 header length H
  bytes 16-..  H bytes of UTF-8 JSON: array directory (name, shape, byte
               offset into the payload), vocabulary, config echo, metadata
  remainder    payload: the arrays' float64 data, row-major, concatenated
               in directory order (names sorted)

The same container stores model parameters, optimizer state, and anything
else named-array shaped, so checkpoints stay portable and byte-stable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numgrad import Array, ContractError
from .models import (ELMParams, EncoderParams, GruParams, JointParams,
                     ModelConfig, PredictionParams, RNNTParams, Vocabulary,
                     elm_named)

MAGIC = b"RKT1"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    arrays: dict[str, np.ndarray]
    vocab: Vocabulary | None
    config: dict
    metadata: dict
    version: int


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray | Array],
                    vocab: Vocabulary | None = None,
                    config: dict | None = None,
                    metadata: dict | None = None) -> None:
    plain = {}
    for name, arr in arrays.items():
        data = arr.data if isinstance(arr, Array) else arr
        plain[name] = np.ascontiguousarray(data, dtype="<f8")
    directory = []
    offset = 0
    for name in sorted(plain):
        a = plain[name]
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = {
        "arrays": directory,
        "config": config or {},
        "metadata": metadata or {},
        "vocabulary": vocab.to_dict() if vocab is not None else None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(plain):
            fh.write(plain[name].tobytes())


def load_checkpoint(path: Path) -> CheckpointData:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        hlen = struct.unpack("<Q", fh.read(8))[0]
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(shape).astype(np.float64)
    vocab = header.get("vocabulary")
    return CheckpointData(
        arrays=arrays,
        vocab=Vocabulary.from_dict(vocab) if vocab else None,
        config=header.get("config", {}),
        metadata=header.get("metadata", {}),
        version=version,
    )


# ---------------------------------------------------------------------------
# model-level wrappers
# ---------------------------------------------------------------------------


def save_rnnt(path: Path, params: RNNTParams, vocab: Vocabulary,
              model_cfg: ModelConfig, metadata: dict | None = None) -> None:
    meta = {"kind": "rnnt", "discardable": ["ctc.w", "ctc.b"]}
    meta.update(metadata or {})
    save_checkpoint(path, params.named(), vocab, model_cfg.to_dict(), meta)


def _gru_from(arrays: dict[str, np.ndarray], prefix: str) -> GruParams:
    return GruParams(w=Array(arrays[f"{prefix}.w"]),
                     u=Array(arrays[f"{prefix}.u"]),
                     b=Array(arrays[f"{prefix}.b"]))


def load_rnnt(path: Path) -> tuple[RNNTParams, Vocabulary, ModelConfig, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != "rnnt":
        raise ContractError(f"{path} does not hold transducer parameters")
    cfg = ModelConfig.from_dict(ckpt.config)
    a = ckpt.arrays
    encoder = EncoderParams(
        conv_w=Array(a["enc.conv_w"]), conv_b=Array(a["enc.conv_b"]),
        layers=[_gru_from(a, f"enc.gru{i}") for i in range(cfg.enc_layers)],
        out_w=Array(a["enc.out_w"]), out_b=Array(a["enc.out_b"]),
        stride=cfg.downsample, kernel=cfg.conv_kernel,
    )
    prediction = PredictionParams(
        embed=Array(a["pred.embed"]), gru=_gru_from(a, "pred.gru"),
        out_w=Array(a["pred.out_w"]), out_b=Array(a["pred.out_b"]),
    )
    joint = JointParams(
        enc_w=Array(a["joint.enc_w"]), pred_w=Array(a["joint.pred_w"]),
        bias=Array(a["joint.bias"]), out_w=Array(a["joint.out_w"]),
        out_b=Array(a["joint.out_b"]),
    )
    params = RNNTParams(encoder, prediction, joint,
                        ctc_w=Array(a["ctc.w"]), ctc_b=Array(a["ctc.b"]))
    return params, ckpt.vocab, cfg, ckpt.metadata


def save_elm(path: Path, params: ELMParams, vocab: Vocabulary,
             model_cfg: ModelConfig, metadata: dict | None = None) -> None:
    meta = {"kind": "elm"}
    meta.update(metadata or {})
    save_checkpoint(path, elm_named(params), vocab, model_cfg.to_dict(), meta)


def load_elm(path: Path) -> tuple[ELMParams, Vocabulary, ModelConfig, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != "elm":
        raise ContractError(f"{path} does not hold language-model parameters")
    cfg = ModelConfig.from_dict(ckpt.config)
    a = ckpt.arrays
    params = ELMParams(
        embed=Array(a["elm.embed"]), gru=_gru_from(a, "elm.gru"),
        out_w=Array(a["elm.out_w"]), out_b=Array(a["elm.out_b"]),
    )
    return params, ckpt.vocab, cfg, ckpt.metadata
