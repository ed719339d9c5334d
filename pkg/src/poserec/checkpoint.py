"""Binary tensor checkpoints.

Layout (little-endian)::

    b"PSRC"  u32 version  u32 entry_count
    per entry: u16 name_len, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
               u32 dim * rank, row-major payload

Run metadata (model shape, training config, RNG state) goes to a JSON
sidecar next to the checkpoint, ``<path>.json``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PSRC"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def encode(tensors: dict, dtype="<f8") -> bytes:
    dt = np.dtype(dtype)
    if dt not in CODES:
        raise FormatError(f"unsupported checkpoint dtype {dt}")
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype=dt, order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes, where: str = "<checkpoint>") -> dict:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError(f"{where}: not a PSRC checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{where}: unsupported checkpoint version {version}")
    pos, out = 12, {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{where}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise FormatError(f"{where}: entry {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims)
        if name in out:
            raise FormatError(f"{where}: duplicate entry {name!r}")
        out[name] = arr.copy()
    if pos != len(blob):
        raise FormatError(f"{where}: trailing bytes")
    return out


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: dict, meta: dict | None = None, dtype="<f8") -> Path:
    path = Path(path)
    atomic_write(path, encode(tensors, dtype))
    if meta is not None:
        atomic_write(sidecar(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path


def load(path) -> tuple[dict, dict]:
    path = Path(path)
    tensors = decode(path.read_bytes(), str(path))
    meta_path = sidecar(path)
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return tensors, meta


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
