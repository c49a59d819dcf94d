"""NTC1 checkpoint files.

Layout (all integers u32 little-endian)::

    b"NTC1" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims[rank] | f32 LE payload
    CRC32 of everything above

Optional metadata goes to a JSON sidecar ``<file>.json``.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NTC1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes, prefix: str | None = None) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16:
        raise CheckpointError("file too short to be a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: file is corrupt or truncated")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    pos = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if prefix is None or name.startswith(prefix):
            out[name] = arr.astype(np.float32)
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    if prefix is not None and not out:
        raise CheckpointError(f"no tensors with required prefix {prefix!r}")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    os.replace(tmp, path)
    if metadata is not None:
        Path(str(path) + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, prefix: str | None = None) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes(), prefix)


def load_metadata(path) -> dict:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else {}
