"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"HPCK"
    version    uint32    currently 1
    meta_len   uint32    length of a UTF-8 JSON metadata blob
    meta       bytes
    count      uint32    number of parameter records
    record *   count:
        name_len  uint16
        name      UTF-8 bytes
        ndim      uint8
        dims      ndim x uint32
        payload   prod(dims) x float64, row-major, little-endian

Records are written in sorted-name order so equal parameter sets give
byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_parameters(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f8"))
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_parameters(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(buf[pos: pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos: pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return params, meta


def state_dict(module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.named_parameters().items()}


def load_state_dict(module, params: dict[str, np.ndarray], strict: bool = True) -> None:
    own = module.named_parameters()
    missing = set(own) - set(params)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in own.items():
        if name in params:
            if params[name].shape != p.data.shape:
                raise CheckpointError(f"{name}: shape {params[name].shape} != {p.data.shape}")
            p.data = params[name].copy()
