"""8-bit binary PGM (P5) and PPM (P6) reading and writing."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _tokens(blob: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(blob)
    while len(out) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        out.append(blob[start:pos])
    return out, pos


def decode(blob: bytes) -> np.ndarray:
    """Return an (H, W) or (H, W, 3) uint8-range array scaled to [0, 1] float32."""
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}; expected P5 or P6")
    (w, h, maxval), pos = _tokens(blob, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-numeric netpbm header field") from None
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported maxval {maxval}; only 8-bit images are supported")
    if w < 1 or h < 1:
        raise FormatError(f"invalid image size {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    raw = blob[pos : pos + size]
    if len(raw) != size:
        raise FormatError(f"expected {size} pixel bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if arr.max(initial=0) > maxval:
        raise FormatError("pixel value exceeds maxval")
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return arr.astype(np.float32) / np.float32(maxval)


def encode(image: np.ndarray) -> bytes:
    """Encode values in [0, 1], shaped (H, W), (H, W, 3), (1, H, W) or (3, H, W)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[-1] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {np.shape(image)}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    px = np.rint(arr * 255).astype(np.uint8)
    h, w = px.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + px.tobytes()


def encode_u8(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    magic = b"P6" if px.ndim == 3 else b"P5"
    h, w = px.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + px.tobytes()


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write(path: str | os.PathLike, image: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode(image))
    return path


def write_u8(path: str | os.PathLike, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_u8(pixels))
    return path
