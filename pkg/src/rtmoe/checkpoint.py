"""Checkpoint files.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"RTMOECKP"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 header length H
    next H bytes UTF-8 JSON header:
                 {"kind": ..., "config": {...}, "meta": {...},
                  "tensors": [{"name", "shape", "dtype": "<f4"|"<f8", "offset", "nbytes"}]}
    remainder    raw tensor payload, little-endian, offsets relative to its start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTMOECKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, kind: str, config: dict, params: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = np.asarray(t.data if hasattr(t, "data") else t)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for raw in blobs:
            f.write(raw)


def load(path) -> tuple[str, dict, dict, dict]:
    """Return ``(kind, config, arrays, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen].decode())
    payload = memoryview(buf)[16 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return header["kind"], header["config"], arrays, header["meta"]
