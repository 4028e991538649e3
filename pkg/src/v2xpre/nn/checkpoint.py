"""Binary checkpoint container.

Layout (little-endian)::

    8 bytes   magic b"V2XCKPT\\0"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (sorted keys): version, role, config, meta,
              params = [{name, shape, offset, nbytes}, ...]
    ...       concatenated float64 '<f8' buffers at the stated offsets
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"V2XCKPT\0"
FORMAT_VERSION = 1
ROLES = ("pretrained-encoder", "finetuned-model")


class CheckpointError(ValueError):
    pass


def dumps(params: dict, role: str, config: dict | None = None, meta: dict | None = None) -> bytes:
    if role not in ROLES:
        raise CheckpointError(f"unknown role {role!r}")
    entries, blobs, off = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": off, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        off += arr.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "role": role, "config": config or {},
                         "meta": meta or {}, "params": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def loads(data: bytes):
    """Returns ``(params, header)``."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    start = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    base = start + hlen
    if base + sum(e["nbytes"] for e in header["params"]) != len(data):
        raise CheckpointError("checkpoint size does not match its header")
    params = {}
    for e in header["params"]:
        arr = np.frombuffer(data, "<f8", e["nbytes"] // 8, base + e["offset"]).astype(np.float64)
        params[e["name"]] = arr.reshape(e["shape"])
    return params, header


def save(path, params: dict, role: str, config=None, meta=None):
    Path(path).write_bytes(dumps(params, role, config, meta))


def load(path):
    return loads(Path(path).read_bytes())
