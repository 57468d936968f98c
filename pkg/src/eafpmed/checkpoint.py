"""Binary checkpoint format shared by parameter sets, models and tensors.

Layout (all integers little-endian)::

    b"EAFP" | u16 version | u32 array count
    per array: u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f32 values

Values are written row-major as IEEE-754 binary32.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EAFP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} not representable")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an EAFP checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            nbytes = 4 * size
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated data for array {name!r}")
            out[name] = np.frombuffer(view[pos : pos + nbytes], dtype="<f4").reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last array")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
