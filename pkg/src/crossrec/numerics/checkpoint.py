"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"XRCK"
    4       2     version (u16) = 1
    6       4     metadata length N (u32)
    10      N     metadata, UTF-8 JSON (sorted keys, no whitespace)
    10+N    4     tensor count T (u32)
    then T records, in the order given at save time:
            2     name length n (u16)
            n     name, UTF-8
            1     ndim r (u8)
            8*r   dims (u64 each)
            8*P   payload, float64 little-endian, row-major, P = prod(dims)

Saving the same named arrays and metadata twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict, dict]:
    try:
        return _parse(raw)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _parse(raw: bytes) -> tuple[dict, dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(raw[pos:pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        tensors[name] = arr.astype(np.float64)
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())


def checksum(tensors: dict) -> str:
    """sha256 over names and float64 payloads, in insertion order."""
    h = hashlib.sha256()
    for name, arr in tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
