"""USTC tensor container.

Layout (little-endian)::

    b"USTC"  u32 version
    repeated until EOF:
        u32 name_len, name (utf-8), u8 dtype (1 = f64), u32 rank,
        u32 extents[rank], f64 payload[prod(extents)]

A JSON sidecar (``<path>.json``) carries hyperparameters and the seed.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"USTC"
VERSION = 1
DTYPE_F64 = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict):
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name, arr in tensors.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")  # keeps 0-d shape
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BI", DTYPE_F64, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    out = {}
    try:
        while off < len(data):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise struct.error("name")
            off += n
            dtype, rank = struct.unpack_from("<BI", data, off)
            off += 5
            if dtype != DTYPE_F64:
                raise CheckpointError(f"{path}: unknown dtype code {dtype} at byte {off - 5}")
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(data):
                raise struct.error("payload")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
    except struct.error:
        raise CheckpointError(f"{path}: truncated at byte {off}") from None
    return out


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(path, tensors: dict, meta: dict):
    save_tensors(path, tensors)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple:
    tensors = load_tensors(path)
    meta = json.loads(sidecar_path(path).read_text())
    return tensors, meta
