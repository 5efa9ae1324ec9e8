"""Binary tensor container.

Layout (little-endian)::

    b"FDT2" | version u16 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | extents u32 * rank | float32 data

Tensors keep their insertion order. Data is always stored as float32.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FDT2"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would turn rank 0 into rank 1
        if a.ndim > 255:
            raise CheckpointError(f"{name}: rank {a.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {pos + n} bytes, have {len(view)}")
        out = view[pos: pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not an FDT2 checkpoint")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("tensor name is not valid UTF-8") from e
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))  # 1 for rank 0
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(tuple(shape))
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r}")
        out[name] = data
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save(path, tensors: dict) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())
