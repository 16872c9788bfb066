"""Binary dataset format for encoded instances.

Layout (little-endian)::

    b"NDCD" | u32 version | u32 d | u32 L | u32 instance count
    u32 config length | UTF-8 JSON config blob
    per instance:
        u32 text rows (N+1) | u32 gold | u32 count | u64 seed
        f32 text[(N+1) x d] | f32 images[L x d] | f32 cross[L x d]
        u8 masks[count x L]

The config blob holds the generator settings and their hash; files exported
from real encoders use the same layout with whatever metadata they carry.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .datagen import Instance
from .errors import FormatError

MAGIC = b"NDCD"
VERSION = 1

_HEAD = struct.Struct("<4sIIII")
_INST = struct.Struct("<IIIQ")


def encode_dataset(instances, config: dict | None = None, d: int | None = None, L: int | None = None) -> bytes:
    instances = list(instances)
    if instances:
        d = instances[0].d if d is None else d
        L = instances[0].L if L is None else L
    if d is None or L is None:
        raise ValueError("an empty dataset needs explicit d and L")
    meta = dict(config or {})
    if instances and "config_hash" not in meta:
        meta["config_hash"] = instances[0].config_hash
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, d, L, len(instances)), struct.pack("<I", len(blob)), blob]
    for i, inst in enumerate(instances):
        if inst.text.shape[1] != d or inst.images.shape != (L, d) or inst.cross.shape != (L, d):
            raise ValueError(f"instance {i} does not match d={d}, L={L}")
        if inst.masks.shape != (inst.count, L):
            raise ValueError(f"instance {i}: masks shape {inst.masks.shape} != ({inst.count}, {L})")
        parts.append(_INST.pack(inst.text.shape[0], inst.gold, inst.count, inst.seed))
        for arr in (inst.text, inst.images, inst.cross):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(inst.masks, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes):
    """Parse dataset bytes. Returns ``(instances, header)`` where header has d, L, count, config."""
    if len(buf) < _HEAD.size:
        raise FormatError("truncated dataset header", len(buf))
    magic, version, d, L, n = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    if d == 0 or L == 0:
        raise FormatError(f"invalid dimensions d={d}, L={L}", 8)
    pos = _HEAD.size
    if pos + 4 > len(buf):
        raise FormatError("truncated dataset header", pos)
    (blob_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + blob_len > len(buf):
        raise FormatError("truncated config blob", pos)
    try:
        config = json.loads(buf[pos:pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("config blob is not valid JSON", pos) from None
    pos += blob_len
    config_hash = config.get("config_hash", "")

    def floats(count: int, at: int) -> np.ndarray:
        end = at + 4 * count
        if end > len(buf):
            raise FormatError(f"truncated tensor payload: need {4 * count} bytes, {len(buf) - at} left", at)
        return np.frombuffer(buf, dtype="<f4", count=count, offset=at).astype(np.float32)

    instances = []
    for i in range(n):
        if pos + _INST.size > len(buf):
            raise FormatError(f"truncated record header for instance {i}", pos)
        rows, gold, count, seed = _INST.unpack_from(buf, pos)
        if rows < 2 or gold >= L or count < 1:
            raise FormatError(f"instance {i}: invalid record (rows={rows}, gold={gold}, count={count})", pos)
        pos += _INST.size
        text = floats(rows * d, pos).reshape(rows, d)
        pos += 4 * rows * d
        images = floats(L * d, pos).reshape(L, d)
        pos += 4 * L * d
        cross = floats(L * d, pos).reshape(L, d)
        pos += 4 * L * d
        if pos + count * L > len(buf):
            raise FormatError(f"truncated masks for instance {i}", pos)
        masks = np.frombuffer(buf, dtype=np.uint8, count=count * L, offset=pos).reshape(count, L).astype(bool)
        pos += count * L
        instances.append(Instance(text, images, cross, int(gold), int(count), masks, int(seed), config_hash))
    if pos != len(buf):
        raise FormatError(
            f"{len(buf) - pos} bytes left after {n} instances; header dimensions (d={d}, L={L}) disagree with payload",
            pos,
        )
    return instances, {"d": d, "L": L, "count": n, "config": config}


def write_dataset(path, instances, config: dict | None = None, d: int | None = None, L: int | None = None) -> None:
    Path(path).write_bytes(encode_dataset(instances, config, d, L))


def read_dataset(path):
    return decode_dataset(Path(path).read_bytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size + 4)
        if len(head) < _HEAD.size + 4:
            raise FormatError("truncated dataset header", len(head))
        magic, version, d, L, n = _HEAD.unpack_from(head, 0)
        if magic != MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}", 4)
        (blob_len,) = struct.unpack_from("<I", head, _HEAD.size)
        blob = fh.read(blob_len)
        if len(blob) < blob_len:
            raise FormatError("truncated config blob", _HEAD.size + 4 + len(blob))
    return {"d": d, "L": L, "count": n, "config": json.loads(blob.decode("utf-8")), "version": version}
