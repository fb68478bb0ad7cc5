"""
Byte-oriented range coder with a 32-bit state and carry propagation.

Every symbol is coded against an integer CDF whose last entry is 2**precision.
The CDF for symbol i must be rebuilt identically on the decoder side; see
`cdf_quantize` in the api module for the only construction used here.

Chunk layout (little-endian): u32 byte length | u32 symbol count | u32 crc32 | bytes.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from roicodec.base.exceptions import BitstreamError, RangeCoderError

logger = logging.getLogger(__name__)

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
_CHUNK_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class Bitchunk:
    data: bytes
    symbol_count: int
    checksum: int

    @classmethod
    def wrap(cls, data: bytes, symbol_count: int) -> "Bitchunk":
        return cls(bytes(data), symbol_count, zlib.crc32(data) & MASK32)

    @property
    def num_bits(self) -> int:
        return 8 * len(self.data)

    def to_bytes(self) -> bytes:
        return _CHUNK_HEADER.pack(len(self.data), self.symbol_count, self.checksum) + self.data

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["Bitchunk", int]:
        """Parse one chunk starting at `offset`; returns the chunk and the offset past it."""
        if offset + _CHUNK_HEADER.size > len(blob):
            raise BitstreamError(f"Truncated chunk header at byte {offset}")
        length, count, checksum = _CHUNK_HEADER.unpack_from(blob, offset)
        start = offset + _CHUNK_HEADER.size
        end = start + length
        if end > len(blob):
            raise BitstreamError(f"Chunk at byte {offset} claims {length} bytes, only {len(blob) - start} left")
        data = bytes(blob[start:end])
        if zlib.crc32(data) & MASK32 != checksum:
            raise BitstreamError(f"Checksum mismatch in chunk at byte {offset}")
        return cls(data, count, checksum), end


class RangeEncoder:
    def __init__(self, precision: int = 16):
        self.precision = precision
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> self.precision
        self.low += start * r
        self.range = r * freq
        while self.range < TOP:
            self.range = (self.range << 8) & MASK32
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes, precision: int = 16):
        self.precision = precision
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next_byte()) & MASK32

    def _next_byte(self) -> int:
        # reading past the end yields zeros; the chunk checksum catches real truncation
        if self.pos < len(self.data):
            byte = self.data[self.pos]
        else:
            byte = 0
        self.pos += 1
        return byte

    def decode(self, cdf: np.ndarray) -> int:
        total = 1 << self.precision
        r = self.range >> self.precision
        value = min(self.code // r, total - 1)
        symbol = int(np.searchsorted(cdf, value, side="right")) - 1
        if symbol < 0 or symbol >= len(cdf) - 1:
            raise RangeCoderError(f"Decoded value {value} outside the CDF support")
        start, stop = int(cdf[symbol]), int(cdf[symbol + 1])
        self.code -= start * r
        self.range = r * (stop - start)
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range = (self.range << 8) & MASK32
        return symbol


def range_encode(symbols: Sequence[int], cdfs: Sequence[np.ndarray], precision: int = 16) -> Bitchunk:
    """Code symbol i (an index into its CDF) with cdfs[i]."""
    if len(symbols) != len(cdfs):
        raise RangeCoderError(f"{len(symbols)} symbols but {len(cdfs)} CDFs")
    if len(symbols) == 0:
        return Bitchunk.wrap(b"", 0)
    total = 1 << precision
    encoder = RangeEncoder(precision)
    for i, (s, cdf) in enumerate(zip(symbols, cdfs)):
        s = int(s)
        if s < 0 or s >= len(cdf) - 1:
            raise RangeCoderError(f"Symbol {s} at position {i} outside CDF support [0, {len(cdf) - 2}]")
        if int(cdf[-1]) != total:
            raise RangeCoderError(f"CDF at position {i} does not sum to 2**{precision}")
        start, stop = int(cdf[s]), int(cdf[s + 1])
        if stop <= start:
            raise RangeCoderError(f"Symbol {s} at position {i} has zero frequency")
        encoder.encode(start, stop - start)
    chunk = Bitchunk.wrap(encoder.finish(), len(symbols))
    logger.debug(f"Range coded {len(symbols)} symbols into {len(chunk.data)} bytes")
    return chunk


def range_decode(chunk: Bitchunk, cdfs: Sequence[np.ndarray], precision: int = 16) -> list[int]:
    if chunk.symbol_count != len(cdfs):
        raise BitstreamError(f"Chunk holds {chunk.symbol_count} symbols, decoder expects {len(cdfs)}")
    if chunk.symbol_count == 0:
        return []
    decoder = RangeDecoder(chunk.data, precision)
    symbols = [decoder.decode(cdf) for cdf in cdfs]
    if decoder.pos > len(chunk.data) + 4:
        raise BitstreamError("Range decoder ran past the end of the chunk")
    return symbols
