"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError("only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    body = data[pos:pos + size]
    if len(body) != size:
        raise ImageFormatError("truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr if channels == 3 else arr[..., 0]


def encode_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError("expected H x W or H x W x 3 pixels")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def to_float(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-to-even."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as an H x W x 3 float image in [0, 1]."""
    with open(path, "rb") as fh:
        arr = decode_pnm(fh.read())
    if arr.ndim != 3:
        raise ImageFormatError(f"{path}: expected a colour (P6) image")
    return to_float(arr)


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(to_uint8(image)))


def read_pgm(path) -> np.ndarray:
    """Read a P5 file as raw uint8 values."""
    with open(path, "rb") as fh:
        arr = decode_pnm(fh.read())
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected a grayscale (P5) image")
    return arr


def write_pgm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(np.asarray(pixels, dtype=np.uint8)))
