"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a little-endian uint32 format version, a uint64
manifest byte length, the UTF-8 JSON manifest, then the raw parameter payload
(float64 little-endian, concatenated in manifest order). The manifest records
the model config, a SHA-256 hash of its canonical JSON (so a checkpoint can't
silently be loaded into a different architecture), every parameter's name and
shape, and free-form run metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerClassifier

MAGIC = b"NODEFCKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(cfg: ModelConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_checkpoint(path: str | Path, model: TransformerClassifier,
                    metadata: dict | None = None) -> None:
    names = model.params.names()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "params": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
        "metadata": metadata or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[TransformerClassifier, dict]:
    """Rebuild the model (weights included) and return (model, metadata)."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (manifest_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        manifest = json.loads(raw[offset:offset + manifest_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest") from e
    offset += manifest_len

    cfg = ModelConfig.from_dict(manifest["config"])
    if config_hash(cfg) != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    model = TransformerClassifier(cfg, seed=0)

    state: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n_bytes = 8 * shape[0] * shape[1]
        if offset + n_bytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        state[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=shape[0] * shape[1], offset=offset
        ).reshape(shape)
        offset += n_bytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    model.params.load_state(state)
    return model, manifest["metadata"]
