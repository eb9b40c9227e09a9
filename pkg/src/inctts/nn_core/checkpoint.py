"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    b"INCTTSCK"              magic
    u32 version              currently 1
    u32 meta_len, bytes      UTF-8 JSON metadata (sorted keys)
    u32 count                number of entries
    per entry:
      u32 name_len, bytes    UTF-8 parameter name
      u8  trainable
      u32 ndim, u64[ndim]    shape
      f64[prod(shape)]       row-major little-endian values

The encoding has no timestamps or hash-order dependence, so identical
stores produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .params import ParameterStore

MAGIC = b"INCTTSCK"
VERSION = 1


def dumps(store: ParameterStore, meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b]
    parts.append(struct.pack("<I", len(store)))
    for name, p in store.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", int(p.trainable), p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[ParameterStore, dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    version, meta_len = struct.unpack_from("<II", data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    store = ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        trainable, ndim = struct.unpack_from("<BI", data, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        store.add(name, value.astype(np.float64), bool(trainable))
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return store, meta


def save(path, store: ParameterStore, meta: dict | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    data = dumps(store, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
