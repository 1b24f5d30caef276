"""Checkpoint files.

Layout::

    b"MBCKPT" | u16 format version | u32 manifest length | manifest JSON | payload

The manifest (sorted-key JSON) lists the model config, the creation seed and,
per parameter, its name, shape, dtype and byte offset into the payload.  The
payload is every parameter's little-endian bytes back to back; its sha256 is
stored in the manifest and checked on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MembaModel, ModelConfig

MAGIC = b"MBCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<HI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    seed: int = 0
    extra: dict | None = None

    def build(self) -> MembaModel:
        model = MembaModel(self.config)
        load_into(model, self.arrays, strict=True)
        return model


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.model_dump(mode="json"),
        "seed": ckpt.seed,
        "params": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": ckpt.extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _HEAD.pack(FORMAT_VERSION, len(blob)) + blob + payload


def decode(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    pos = len(MAGIC)
    if len(data) < pos + _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    version, mlen = _HEAD.unpack_from(data, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    pos += _HEAD.size
    try:
        manifest = json.loads(data[pos:pos + mlen])
    except ValueError as err:
        raise CheckpointError(f"unreadable checkpoint manifest: {err}") from err
    payload = data[pos + mlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("payload hash mismatch: checkpoint is corrupt")
    arrays = {}
    for e in manifest["params"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(ModelConfig(**manifest["model_config"]), arrays, manifest["seed"], manifest["extra"] or None)


def save_checkpoint(path: str | Path, model: MembaModel, seed: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt = Checkpoint(model.cfg, {p.name: p.data for p in model.parameters()}, seed, extra)
    path.write_bytes(encode(ckpt))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode(path.read_bytes())


def load_into(model: MembaModel, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy arrays into same-named parameters; returns the names copied.

    ``strict`` demands an exact name match.  Otherwise parameters missing from
    ``arrays`` keep their initial values (new adapters, a new gate path, a new
    head) and extra arrays are ignored.  A shape mismatch is always an error.
    """
    params = model.named_parameters()
    if strict and set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, p in params.items():
        if name in arrays and tuple(arrays[name].shape) != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {tuple(arrays[name].shape)}, model {p.shape}")
    copied = []
    for name, p in params.items():
        if name in arrays:
            p.value.data = np.array(arrays[name], dtype=p.data.dtype)
            copied.append(name)
    return copied
