"""Versioned binary tensor container.

Layout (all integers little-endian)::

    magic      8 bytes  b"TTACTNS\\x00"
    version    u32
    meta_len   u32, followed by that many bytes of UTF-8 JSON
    n_tensors  u32
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float64, 1 = int64)
        ndim     u32, then ndim x u64 shape
        data     row-major, 8 bytes per element

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TTACTNS\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1}


def write_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value)
        kind = arr.dtype.kind
        if kind == "b" or kind == "u":
            kind = "i"
        if kind not in _CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        code = _CODES[kind]
        arr = np.asarray(arr, dtype=_DTYPES[code], order="C")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BI", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a tensor file")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"{path}: truncated")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    version, meta_len = take("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        code, ndim = take("<BI")
        if code not in _DTYPES:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = take(f"<{ndim}Q") if ndim else ()
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n_bytes > len(buf):
            raise FormatError(f"{path}: tensor {name!r} truncated")
        arr = np.frombuffer(buf, dtype=_DTYPES[code], count=n_bytes // 8, offset=pos)
        tensors[name] = arr.reshape(shape).copy()
        pos += n_bytes
    return tensors, meta
