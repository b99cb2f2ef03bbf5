"""Binary checkpoint format.

Layout (little endian)::

    b"STTIS\\0"            magic
    u32                   format version
    u32 + bytes           JSON config blob
    repeated until EOF:
        u32 + bytes       parameter name (utf-8)
        u32               ndim
        u32 * ndim        dims
        f64 * prod(dims)  values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STTIS\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(config: dict, params: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad magic")
    pos = len(MAGIC)

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = read("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = read("<I")
    config = json.loads(data[pos:pos + blob_len].decode())
    pos += blob_len
    params: dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = read("<I")
        name = data[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = read("<I")
        dims = read(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated values for {name!r}")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    return config, params


def save(path, config: dict, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, params))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
