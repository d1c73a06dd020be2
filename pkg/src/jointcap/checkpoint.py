"""Binary checkpoint container: JSON metadata plus named float64 blocks.

Blocks are written in name order so equal state always encodes to equal bytes.

Layout (little-endian)::

    b"JRCK" | u32 version | sha256(payload) | payload
    payload = u32 meta_len | meta (UTF-8 JSON) | u32 n_blocks | blocks
    block   = u32 name_len | name | u32 ndim | u32 * ndim shape | f64 * prod(shape)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"JRCK"
VERSION = 1


def encode(meta: dict, blocks: dict[str, np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blocks))]
    for name, arr in sorted(blocks.items()):
        # ascontiguousarray would promote 0-d blocks to 1-d
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + hashlib.sha256(payload).digest() + payload


def decode(data: bytes):
    if len(data) < 40 or data[:4] != MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    digest, payload = data[8:40], data[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise LoadError("checkpoint content hash mismatch (corrupt or truncated)")
    try:
        pos = 0
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        meta = json.loads(payload[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(payload):
                raise LoadError(f"block {name!r} overruns the payload")
            blocks[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
        if pos != len(payload):
            raise LoadError("trailing bytes after last block")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"malformed checkpoint: {exc}") from exc
    return meta, blocks


def save(path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    """Write-temp-then-rename so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, blocks))
    tmp.replace(path)


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(str(exc)) from exc
    return decode(data)
