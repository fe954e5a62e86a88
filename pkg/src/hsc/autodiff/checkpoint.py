"""HSC1 parameter checkpoints.

Layout (little-endian): magic ``b"HSC1"``, u32 count, then per entry u32
name length, UTF-8 name, u32 rank, rank x u32 dims and a float32 payload.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"HSC1"


class CheckpointFormatError(ValueError):
    pass


def dumps(named: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointFormatError("not an HSC1 checkpoint")
    pos = 4
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after checkpoint entries")
    return out


def save(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(named))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def encode_text(text: str) -> np.ndarray:
    """Store text bytes as float32 values so metadata fits the parameter format."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float32).astype(np.uint8)).decode("utf-8")
