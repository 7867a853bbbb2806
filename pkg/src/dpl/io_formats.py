"""Binary file formats: ``.tns`` float tensors, P6 images and P5 masks."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

TNS_MAGIC = b"TNS1"
MAX_NDIM = 4


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


def write_tensor(path, dims: Sequence[int], data) -> None:
    dims = [int(d) for d in dims]
    if not 1 <= len(dims) <= MAX_NDIM:
        raise FormatError(f"ndim must be in 1..{MAX_NDIM}, got {len(dims)}")
    if any(d < 0 or d > 0xFFFFFFFF for d in dims):
        raise FormatError(f"dimension out of uint32 range: {dims}")
    arr = np.asarray(data, dtype="<f4").reshape(-1)
    if arr.size != int(np.prod(dims, dtype=np.int64)):
        raise FormatError(f"data length {arr.size} does not match dims {dims}")
    header = TNS_MAGIC + struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_tensor(path) -> tuple[list[int], np.ndarray]:
    """Return ``(dims, data)``; ``data`` is a float32 array shaped ``dims``."""
    raw = Path(path).read_bytes()
    if raw[:4] != TNS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 5:
        raise FormatError(f"{path}: truncated header")
    ndim = raw[4]
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"{path}: unsupported ndim {ndim}")
    end = 5 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated dims")
    dims = list(struct.unpack(f"<{ndim}I", raw[5:end]))
    count = 1
    for d in dims:
        count *= d
    if len(raw) - end != 4 * count:
        raise FormatError(f"{path}: payload is {len(raw) - end} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", offset=end).astype(np.float32).reshape(dims)
    return dims, data


def save_array(path, arr) -> None:
    arr = np.asarray(arr)
    write_tensor(path, arr.shape, arr)


def load_array(path) -> np.ndarray:
    return read_tensor(path)[1]


def quantize(values) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _write_pnm(path, magic: bytes, body: np.ndarray, h: int, w: int) -> None:
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(body.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    n = w * h * channels
    body = raw[pos : pos + n]
    if len(body) != n:
        raise FormatError(f"{path}: raster truncated ({len(body)} of {n} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8).reshape((h, w, channels) if channels > 1 else (h, w))
    return arr.astype(np.float32) / np.float32(255.0)


def write_image_ppm(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {image.shape}")
    h, w, _ = image.shape
    _write_pnm(path, b"P6", quantize(image), h, w)


def read_image_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def write_mask_pgm(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be HxW, got {mask.shape}")
    h, w = mask.shape
    _write_pnm(path, b"P5", quantize(mask), h, w)


def read_mask_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
