"""Checkpoint files: a JSON manifest followed by GTNS tensor records.

Layout::

    b"GCKP" | version:u32 | manifest_len:u64 | manifest (UTF-8 JSON) | records

The manifest holds the network config, the epoch/step counters, training
settings, the RNG state and the ordered list of record names. Records are
written in that order. Keys are sorted so equal checkpoints are equal bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import NetworkSpec, convert_mode, spec_from_dict, spec_to_dict
from .tensor import FormatError, read_tensor, write_tensor

MAGIC = b"GCKP"
VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    tensors: dict  # "param.*", "buffer.*", "velocity.*", "norm.*"
    epoch: int = 0
    step: int = 0
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {k[len("param."):]: v for k, v in self.tensors.items() if k.startswith("param.")}

    def velocity(self) -> dict:
        return {k[len("velocity."):]: v for k, v in self.tensors.items() if k.startswith("velocity.")}

    def model_state(self) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(("param.", "buffer."))}


def to_bytes(ck: Checkpoint) -> bytes:
    names = list(ck.tensors)
    manifest = {
        "config": spec_to_dict(ck.spec),
        "epoch": ck.epoch,
        "step": ck.step,
        "rng_state": ck.rng_state,
        "meta": ck.meta,
        "records": names,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        write_tensor(buf, ck.tensors[n])
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise FormatError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 16:
        raise FormatError("truncated checkpoint header")
    version, size = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    manifest = json.loads(data[16 : 16 + size].decode())
    fp = io.BytesIO(data)
    fp.seek(16 + size)
    tensors = {name: read_tensor(fp) for name in manifest["records"]}
    if fp.read(1):
        raise FormatError("trailing bytes after checkpoint records")
    return Checkpoint(spec_from_dict(manifest["config"]), tensors, manifest["epoch"], manifest["step"],
                      manifest.get("rng_state"), manifest.get("meta", {}))


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def convert_checkpoint(ck: Checkpoint, mode: str) -> Checkpoint:
    """Same tensors, every GUNN stage switched to ``mode``."""
    return Checkpoint(convert_mode(ck.spec, mode), dict(ck.tensors), ck.epoch, ck.step, ck.rng_state, dict(ck.meta))
