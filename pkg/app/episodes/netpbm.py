# app/episodes/netpbm.py
"""
Binary NetPBM images: P6 (RGB) and P5 (grey / label masks), maxval <= 255.

Colour images are float64 in [0, 1], quantized to 1/255 steps on write. Label masks are
written as raw byte values, so a label round-trips exactly as long as it fits in a byte.
"""
import os
from typing import Tuple

import numpy as np

from app.errors import FormatError

_WHITESPACE = b" \t\r\n"


def _header_tokens(data: bytes, path: str, count: int) -> Tuple[list, int]:
    """First `count` whitespace-separated header tokens (skipping # comments) and the data offset."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated NetPBM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or data[pos] not in _WHITESPACE:
        raise FormatError(f"{path}: missing whitespace after NetPBM header")
    return tokens, pos + 1


def _read(path: str, magic: bytes, channels: int) -> Tuple[np.ndarray, int]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise FormatError(f"{path}: cannot read image ({e})") from e
    tokens, offset = _header_tokens(data, path, 4)
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, found magic {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric NetPBM header field") from e
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid image size {width}x{height}")
    if not 1 <= maxval <= 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    expected = width * height * channels
    raster = data[offset:]
    if len(raster) != expected:
        raise FormatError(f"{path}: expected {expected} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr, maxval


def _write(path: str, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """H x W x 3 float64 image in [0, 1]."""
    arr, maxval = _read(path, b"P6", 3)
    return arr.astype(np.float64) / maxval


def write_ppm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite pixels")
    _write(path, b"P6", np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8))


def read_pgm_labels(path: str) -> np.ndarray:
    """H x W int64 label mask; pixel value = label."""
    arr, _ = _read(path, b"P5", 1)
    return arr[:, :, 0].astype(np.int64)


def write_pgm_labels(path: str, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"label mask must be H x W, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise ValueError(f"labels must lie in [0, 255], got [{mask.min()}, {mask.max()}]")
    _write(path, b"P5", mask.astype(np.uint8)[:, :, None])
