"""Versioned binary checkpoint.

Layout: 8-byte magic, uint32 format version, uint64 header length, a UTF-8
YAML header (dims, relation names, tensor names and shapes, run config), then
every tensor as little-endian float64 in header order.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from models import RunConfig
from utils.encoder import Dims, ModelParams, RelationVocab
from utils.errors import CheckpointError, ShapeError, VocabError

MAGIC = b"FRAGALN\0"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    config: RunConfig | None


def save_checkpoint(
    path: str | os.PathLike, params: ModelParams, config: RunConfig | None = None
) -> Path:
    tensors = params.tensors()
    header = {
        "dims": {
            "dim_word": params.dims.dim_word,
            "embedding_dim": params.dims.embedding_dim,
            "dim_image": params.dims.dim_image,
        },
        "relations": list(params.relations.relations),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors.items()],
        "config": config.model_dump(mode="json") if config is not None else None,
    }
    header_bytes = yaml.safe_dump(header, sort_keys=False, allow_unicode=True).encode("utf-8")

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for tensor in tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return out


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = _PREAMBLE.size + header_len
    if len(data) < offset:
        raise CheckpointError(f"{path}: truncated header")

    try:
        header = yaml.safe_load(data[_PREAMBLE.size : offset].decode("utf-8"))
        dims = Dims(**header["dims"])
        relations = RelationVocab(tuple(header["relations"]))
        specs = header["tensors"]
        config = RunConfig.model_validate(header["config"]) if header.get("config") else None
    except (yaml.YAMLError, UnicodeDecodeError, KeyError, TypeError, ValidationError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc

    tensors: dict[str, np.ndarray] = {}
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        size = int(np.prod(shape)) * 8
        if len(data) < offset + size:
            raise CheckpointError(f"{path}: truncated tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).reshape(
            shape
        )
        offset += size
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    try:
        params = ModelParams.from_tensors(relations, dims, tensors)
    except (ShapeError, VocabError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if not params.is_finite():
        raise CheckpointError(f"{path}: checkpoint holds non-finite values")
    return Checkpoint(params=params, config=config)
