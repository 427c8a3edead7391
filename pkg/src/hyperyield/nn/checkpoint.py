"""Binary checkpoint container.

Layout (little-endian)::

    b"H3DR" | u8 version | u32 header length | UTF-8 JSON header | f64 blocks

The JSON header carries the model config, optional metadata and the ordered
block table (name, group, shape); the blocks follow back to back in that
order.  Groups are ``param``, ``stat`` (batch-norm running statistics) and
``normalizer`` (feature min/max).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..raster import Normalizer
from .network import Hyper3DNetReg, ModelConfig

MAGIC = b"H3DR"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Hyper3DNetReg
    normalizer: Normalizer | None = None
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _blocks(ckpt: Checkpoint):
    for name, value in ckpt.model.params.items():
        yield "param", name, value
    for name, value in ckpt.model.stats.items():
        yield "stat", name, value
    if ckpt.normalizer is not None:
        yield "normalizer", "mins", ckpt.normalizer.mins
        yield "normalizer", "maxs", ckpt.normalizer.maxs


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table, payload = [], []
    for group, name, value in _blocks(ckpt):
        value = np.ascontiguousarray(value, dtype="<f8")
        table.append({"group": group, "name": name, "shape": list(value.shape)})
        payload.append(value.tobytes())
    header = {"config": ckpt.config.to_dict(), "meta": ckpt.meta, "blocks": table}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(payload)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    offset = start + header_len

    groups = {"param": {}, "stat": {}, "normalizer": {}}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise CheckpointError(f"checkpoint truncated inside block {block['name']}")
        value = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        groups[block["group"]][block["name"]] = value.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last block")

    config = ModelConfig.from_dict(header["config"])
    model = Hyper3DNetReg(config, groups["param"], groups["stat"])
    norm = groups["normalizer"]
    normalizer = Normalizer(norm["mins"], norm["maxs"]) if norm else None
    return Checkpoint(model, normalizer, header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
