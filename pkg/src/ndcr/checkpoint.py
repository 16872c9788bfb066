"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"NDCR" | version | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 LE payload
    trailer:   metadata length | UTF-8 JSON metadata   (may be length 0)

Entries are written in the order given, so encode(decode(b)) == b.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"NDCR"
VERSION = 1

_U32 = struct.Struct("<I")


def encode_checkpoint(state, metadata: dict | None = None) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(n) for n in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = b"" if not metadata else json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated {self.what}: needed {n} bytes, {len(self.buf) - self.pos} left", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(buf: bytes):
    """Parse checkpoint bytes into (ordered name -> float32 array, metadata dict)."""
    r = _Reader(buf, "checkpoint")
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    count = r.u32()
    state = OrderedDict()
    for _ in range(count):
        at = r.pos
        name_len = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", at + 4) from None
        if name in state:
            raise FormatError(f"duplicate entry {name!r}", at)
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"entry {name!r} has implausible rank {rank}", r.pos - 4)
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        state[name] = data
    meta_len = r.u32()
    meta_raw = r.take(meta_len)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint", r.pos)
    try:
        metadata = json.loads(meta_raw.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("checkpoint metadata is not valid JSON", r.pos - meta_len) from None
    return state, metadata


def save_checkpoint(path, state, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(state, metadata))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
