"""Arithmetic coding of symbol grids under context-model frequency tables.

The coder keeps a 32-bit interval in Python integers and emits bits with the
usual underflow (pending-bit) handling.  A stream ends with the shortest bit
pattern whose zero-extension falls inside the final interval, and trailing
zeros are dropped because the decoder reads zeros past the end.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .context import FREQ_TOTAL, ContextModel, freqs_from_logits, grid_freqs
from .quantizer import Codebook, QuantizedLatent

STATE_BITS = 32
FULL = (1 << STATE_BITS) - 1
HALF = 1 << (STATE_BITS - 1)
QUARTER = 1 << (STATE_BITS - 2)
FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193


class CorruptPayload(ValueError):
    """The payload is malformed or truncated."""


class ChecksumMismatch(CorruptPayload):
    """Decoded symbols disagree with the stored checksum (model or stream mismatch)."""


class BitWriter:
    def __init__(self):
        self.bits: list[int] = []

    def write(self, bit: int) -> None:
        self.bits.append(bit)

    def to_bytes(self) -> bytes:
        return np.packbits(np.array(self.bits, dtype=np.uint8)).tobytes()


class BitReader:
    def __init__(self, data: bytes, nbits: int):
        self.bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits].tolist()
        self.pos = 0

    def read(self) -> int:
        bit = self.bits[self.pos] if self.pos < len(self.bits) else 0
        self.pos += 1
        return bit


def cumulative(freqs) -> list[int]:
    cum = [0]
    for f in freqs:
        if f < 1:
            raise ValueError("every symbol needs a frequency of at least 1")
        cum.append(cum[-1] + f)
    return cum


class ArithmeticEncoder:
    def __init__(self):
        self.low, self.high = 0, FULL
        self.pending = 0
        self.out = BitWriter()

    def _emit(self, bit: int) -> None:
        self.out.write(bit)
        for _ in range(self.pending):
            self.out.write(bit ^ 1)
        self.pending = 0

    def encode(self, cum: list[int], symbol: int) -> None:
        total = cum[-1]
        if not 0 <= symbol < len(cum) - 1:
            raise ValueError(f"symbol {symbol} outside alphabet of {len(cum) - 1}")
        span = self.high - self.low + 1
        self.high = self.low + span * cum[symbol + 1] // total - 1
        self.low = self.low + span * cum[symbol] // total
        while True:
            if self.high < HALF:
                self._emit(0)
            elif self.low >= HALF:
                self._emit(1)
                self.low -= HALF
                self.high -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.pending += 1
                self.low -= QUARTER
                self.high -= QUARTER
            else:
                break
            self.low = self.low * 2
            self.high = self.high * 2 + 1

    def finish(self) -> tuple[bytes, int]:
        """Flush; returns (bytes, exact bit count)."""
        if self.low or self.pending:
            # Any value in [low, high] decodes correctly; the one bit below
            # selects the half that lies entirely inside the interval.
            self.pending += 1
            self._emit(0 if self.low < QUARTER else 1)
        bits = self.out.bits
        while bits and bits[-1] == 0:
            bits.pop()
        return self.out.to_bytes(), len(bits)


class ArithmeticDecoder:
    def __init__(self, data: bytes, nbits: int):
        self.reader = BitReader(data, nbits)
        self.low, self.high = 0, FULL
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self.reader.read()

    def decode(self, cum: list[int]) -> int:
        total = cum[-1]
        span = self.high - self.low + 1
        target = ((self.code - self.low + 1) * total - 1) // span
        lo, hi = 0, len(cum) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cum[mid] > target:
                hi = mid
            else:
                lo = mid
        symbol = lo
        self.high = self.low + span * cum[symbol + 1] // total - 1
        self.low = self.low + span * cum[symbol] // total
        while True:
            if self.high < HALF:
                pass
            elif self.low >= HALF:
                self.low -= HALF
                self.high -= HALF
                self.code -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.low -= QUARTER
                self.high -= QUARTER
                self.code -= QUARTER
            else:
                break
            self.low = self.low * 2
            self.high = self.high * 2 + 1
            self.code = (self.code << 1) | self.reader.read()
        return symbol


def fnv1a(symbols) -> int:
    h = FNV_OFFSET
    for b in np.asarray(symbols, dtype="<u2").reshape(-1).tobytes():
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFF
    return h


@dataclass
class CodedPayload:
    data: bytes
    symbol_count: int
    declared_bits: int
    checksum: int = 0

    def to_bytes(self) -> bytes:
        return (struct.pack("<QQ", self.symbol_count, self.declared_bits) + self.data
                + struct.pack("<I", self.checksum))

    @classmethod
    def read_from(cls, buf: bytes, offset: int = 0) -> tuple["CodedPayload", int]:
        """Parse a payload starting at ``offset``; returns it and the offset just past it."""
        if offset + 16 > len(buf):
            raise CorruptPayload("truncated payload header")
        count, nbits = struct.unpack_from("<QQ", buf, offset)
        nbytes = -(-nbits // 8)
        end = offset + 16 + nbytes + 4
        if end > len(buf):
            raise CorruptPayload("truncated payload body")
        data = bytes(buf[offset + 16:offset + 16 + nbytes])
        (checksum,) = struct.unpack_from("<I", buf, end - 4)
        return cls(data, count, nbits, checksum), end

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CodedPayload":
        payload, end = cls.read_from(buf)
        if end != len(buf):
            raise CorruptPayload("trailing bytes after payload")
        return payload


def encode_with_tables(symbols, tables) -> CodedPayload:
    """Code a flat symbol sequence against per-symbol frequency tables."""
    flat = np.asarray(symbols).reshape(-1)
    enc = ArithmeticEncoder()
    for s, freqs in zip(flat.tolist(), tables):
        enc.encode(cumulative(freqs), s)
    data, nbits = enc.finish()
    return CodedPayload(data, flat.size, nbits, fnv1a(flat))


def ideal_bits(symbols, tables) -> float:
    """-sum log2 of the quantized probabilities of the realized symbols."""
    flat = np.asarray(symbols).reshape(-1)
    return float(sum(np.log2(FREQ_TOTAL) - np.log2(t[s]) for s, t in zip(flat.tolist(), tables)))


def _symbol_grid(symbols) -> np.ndarray:
    grid = symbols.symbols if isinstance(symbols, QuantizedLatent) else np.asarray(symbols)
    if grid.ndim == 4 and grid.shape[0] == 1:
        grid = grid[0]
    if grid.ndim != 3:
        raise ValueError("expected a (C, H, W) symbol grid")
    return grid


def _single(conditioning):
    if conditioning is None:
        return None
    cond = conditioning.data if hasattr(conditioning, "data") and not isinstance(conditioning, np.ndarray) else conditioning
    cond = np.asarray(cond)
    return cond[0] if cond.ndim == 4 else cond


def encode(symbols, model: ContextModel, conditioning=None, codebook: Codebook | None = None) -> CodedPayload:
    """Entropy-code a (C, H, W) grid in raster order under ``model``'s frozen PMFs."""
    grid = _symbol_grid(symbols)
    if grid.size and (grid.min() < 0 or grid.max() >= model.levels):
        raise ValueError("symbol out of range for the context model")
    if grid.size == 0:
        return CodedPayload(b"", 0, 0, fnv1a(grid))
    frozen = model.frozen(_centers(model, codebook))
    return encode_with_tables(grid, grid_freqs(frozen, grid, _single(conditioning)))


def decode(payload: CodedPayload, model: ContextModel, grid_shape, conditioning=None,
           codebook: Codebook | None = None) -> QuantizedLatent:
    """Sequentially rebuild the grid; each site's table uses only already-decoded symbols."""
    grid_shape = tuple(int(d) for d in grid_shape)
    n = int(np.prod(grid_shape))
    if payload.symbol_count != n:
        raise CorruptPayload(f"payload holds {payload.symbol_count} symbols, grid needs {n}")
    if len(payload.data) != -(-payload.declared_bits // 8):
        raise CorruptPayload("payload byte length disagrees with its declared bit count")
    centers = _centers(model, codebook)
    grid = np.zeros(grid_shape, dtype=np.int64)
    if n:
        frozen = model.frozen(centers)
        cond = _single(conditioning)
        dec = ArithmeticDecoder(payload.data, payload.declared_bits)
        flat = grid.reshape(-1)
        for i in range(n):
            freqs = freqs_from_logits(frozen.site_logits(grid, i, cond))
            flat[i] = dec.decode(cumulative(freqs))
    if fnv1a(grid) != payload.checksum:
        raise ChecksumMismatch("decoded symbols fail the payload checksum")
    codebook_id = codebook.codebook_id if codebook is not None else 0
    return QuantizedLatent(grid, codebook_id, np.asarray(centers, dtype=np.float32)[grid])


def _centers(model: ContextModel, codebook: Codebook | None) -> np.ndarray:
    if codebook is None:
        return np.linspace(-2.0, 2.0, model.levels)
    if codebook.levels != model.levels:
        raise ValueError("codebook and context model disagree on the alphabet size")
    return codebook.values()
