"""Image files: float buffers for loss-bearing data, 8-bit PNG previews.

Float buffer layout: magic ``F32B``, u32 width, u32 height, u32 channels,
then little-endian float32 samples in row-major (row, column, channel) order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DatasetError

F32_MAGIC = b"F32B"
_HEADER = struct.Struct("<4sIII")


def write_float_buffer(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError("float buffer needs an (H, W) or (H, W, C) array")
    h, w, c = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(F32_MAGIC, w, h, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_float_buffer(path) -> np.ndarray:
    """``(H, W, C)`` float32 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(path, f"cannot read float buffer ({exc.strerror})") from exc
    if len(data) < _HEADER.size:
        raise DatasetError(path, "truncated float buffer header")
    magic, w, h, c = _HEADER.unpack_from(data)
    if magic != F32_MAGIC:
        raise DatasetError(path, "not a float buffer")
    n = w * h * c
    if len(data) != _HEADER.size + 4 * n:
        raise DatasetError(path, f"payload size mismatch for {w}x{h}x{c}")
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=_HEADER.size)
    return arr.reshape(h, w, c).astype(np.float32)


def to_uint8(image) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    """Save an ``(H, W)`` or ``(H, W, 3)`` image in ``[0, 1]``."""
    img = to_uint8(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def normal_map(normals) -> np.ndarray:
    """Unit normals to RGB with ``(n + 1) / 2``."""
    return (np.asarray(normals, dtype=np.float64) + 1.0) / 2.0


def psnr(a, b, mask=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff)) if diff.size else 0.0
    if mse <= 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))
