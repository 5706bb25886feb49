"""FAFC checkpoint files: named float64 tensors, little-endian throughout.

Layout::

    b"FAFC"  u16 version  u32 manifest_length  manifest
    manifest = u32 count, then per tensor:
        u32 name_length, utf-8 name, u32 rank, rank * u32 extents,
        prod(extents) * f64 values (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FAFC"
VERSION = 1


class CheckpointError(FormatError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    manifest = b"".join(parts)
    return MAGIC + struct.pack("<HI", VERSION, len(manifest)) + manifest


def decode(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a FAFC checkpoint (magic {raw[:4]!r})")
    if len(raw) < 10:
        raise CheckpointError(f"{source}: truncated header")
    version, length = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    body = raw[10:]
    if len(body) != length:
        raise CheckpointError(f"{source}: manifest is {len(body)} bytes, header says {length}")
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError(f"{source}: corrupt manifest at byte {pos}")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(body):
            raise CheckpointError(f"{source}: corrupt tensor name at byte {pos}")
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(body):
            raise CheckpointError(f"{source}: tensor {name!r} truncated")
        out[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), str(path))
