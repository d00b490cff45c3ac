"""MPRCKPT1 flat binary checkpoints.

Layout (all integers u64 little-endian): magic ``MPRCKPT1``, tensor count,
then per tensor: name length, utf-8 name, rank, dims, float64 LE payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from mprlab.errors import ConfigError

MAGIC = b"MPRCKPT1"
_U64 = struct.Struct("<Q")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, _U64.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(d) for d in arr.shape)
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ConfigError(f"{path}: not an MPRCKPT1 checkpoint")
    pos = 8

    def u64():
        nonlocal pos
        (val,) = _U64.unpack_from(buf, pos)
        pos += 8
        return val

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        n = u64()
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        dims = tuple(u64() for _ in range(u64()))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise ConfigError(f"{path}: trailing bytes after last tensor")
    return out


def sidecar_path(checkpoint_path) -> Path:
    """``model.ckpt`` -> ``model.ckpt.json``."""
    return Path(str(checkpoint_path) + ".json")


def write_sidecar(checkpoint_path, meta: dict) -> Path:
    path = sidecar_path(checkpoint_path)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_sidecar(checkpoint_path) -> dict:
    path = sidecar_path(checkpoint_path)
    if not path.exists():
        raise ConfigError(f"missing checkpoint sidecar {path}")
    return json.loads(path.read_text())
