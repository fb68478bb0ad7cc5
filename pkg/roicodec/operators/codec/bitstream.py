"""
RVBS bitstream container.

Layout (all integers little-endian):
    header = b"RVBS" | u16 version | u8 variant | u32 height | u32 width | u32 frames
             | u32 gop size | f32 ga | 32-byte model hash | 32-byte mask digest | u32 crc32 of the preceding bytes
    frame  = u8 frame type (b"I" or b"P") | chunks in `chunk_order` order
    chunk  = see `Bitchunk`

Height and width are the unpadded frame size. The mask digest is all zeros unless
the variant needs the masks at the decoder.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from roicodec.base.exceptions import BitstreamError, FormatError
from roicodec.base.types import ChunkKind, FrameType, Variant
from roicodec.operators.entropy.range_coder import MASK32, Bitchunk

logger = logging.getLogger(__name__)

MAGIC = b"RVBS"
VERSION = 1
DIGEST_SIZE = 32
NO_DIGEST = bytes(DIGEST_SIZE)
VARIANT_IDS = {Variant.SSF: 0, Variant.IMPLICIT: 1, Variant.LATENT_SCALING: 2}
_HEADER = struct.Struct(f"<4sHBIIIIf{DIGEST_SIZE}s{DIGEST_SIZE}s")
_CRC = struct.Struct("<I")


def chunk_order(variant: Variant, frame_type: FrameType) -> list[ChunkKind]:
    """Chunks of one frame in stream order; gain chunks come before the latent they scale."""
    order = [ChunkKind.GAIN_HYPER, ChunkKind.GAIN_LATENT] if variant.uses_gain else []
    if frame_type is FrameType.IFRAME:
        return order + [ChunkKind.IFRAME_HYPER, ChunkKind.IFRAME_LATENT]
    return order + [ChunkKind.FLOW_HYPER, ChunkKind.FLOW_LATENT, ChunkKind.RESIDUAL_HYPER, ChunkKind.RESIDUAL_LATENT]


def frame_type(index: int, gop_size: int) -> FrameType:
    return FrameType.IFRAME if index % gop_size == 0 else FrameType.PFRAME


@dataclass
class BitstreamHeader:
    variant: Variant
    height: int
    width: int
    frames: int
    gop_size: int
    ga: float
    model_hash: bytes
    mask_digest: bytes = NO_DIGEST

    def to_bytes(self) -> bytes:
        body = _HEADER.pack(
            MAGIC,
            VERSION,
            VARIANT_IDS[self.variant],
            self.height,
            self.width,
            self.frames,
            self.gop_size,
            self.ga,
            self.model_hash,
            self.mask_digest,
        )
        return body + _CRC.pack(zlib.crc32(body) & MASK32)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["BitstreamHeader", int]:
        size = _HEADER.size + _CRC.size
        if len(blob) < size:
            raise BitstreamError(f"Bitstream too short for header ({len(blob)} bytes)")
        (checksum,) = _CRC.unpack_from(blob, _HEADER.size)
        if zlib.crc32(blob[: _HEADER.size]) & MASK32 != checksum:
            raise BitstreamError("Header checksum mismatch")
        magic, version, variant_id, height, width, frames, gop, ga, model_hash, mask_digest = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise BitstreamError(f"Bad bitstream magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"Unsupported bitstream version {version}")
        variants = {v: k for k, v in VARIANT_IDS.items()}
        if variant_id not in variants:
            raise BitstreamError(f"Unknown variant id {variant_id}")
        if frames < 1 or gop < 1:
            raise BitstreamError(f"Header declares {frames} frames with GoP size {gop}")
        header = cls(variants[variant_id], height, width, frames, gop, ga, model_hash, mask_digest)
        return header, size


@dataclass
class CodedFrame:
    frame_type: FrameType
    chunks: dict[ChunkKind, Bitchunk] = field(default_factory=dict)

    @property
    def num_bits(self) -> int:
        return sum(chunk.num_bits for chunk in self.chunks.values())


@dataclass
class Bitstream:
    header: BitstreamHeader
    frames: list[CodedFrame] = field(default_factory=list)

    @property
    def num_bits(self) -> int:
        """Entropy-coded payload bits, excluding container overhead."""
        return sum(frame.num_bits for frame in self.frames)

    def to_bytes(self) -> bytes:
        out = bytearray(self.header.to_bytes())
        for frame in self.frames:
            out += frame.frame_type.value.encode("ascii")
            for kind in chunk_order(self.header.variant, frame.frame_type):
                out += frame.chunks[kind].to_bytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Bitstream":
        header, offset = BitstreamHeader.from_bytes(blob)
        frames = []
        for index in range(header.frames):
            if offset >= len(blob):
                raise BitstreamError(f"Bitstream ends before frame {index}")
            expected = frame_type(index, header.gop_size)
            found = blob[offset : offset + 1].decode("ascii", errors="replace")
            if found != expected.value:
                raise BitstreamError(f"Frame {index}: expected {expected.value}-frame marker, found {found!r}")
            offset += 1
            frame = CodedFrame(expected)
            for kind in chunk_order(header.variant, expected):
                frame.chunks[kind], offset = Bitchunk.from_bytes(blob, offset)
            frames.append(frame)
        if offset != len(blob):
            raise BitstreamError(f"{len(blob) - offset} trailing bytes after the last frame")
        return cls(header, frames)

    def write(self, path) -> int:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        logger.info(f"Wrote {len(self.frames)} frames ({len(blob)} bytes) to {path}")
        return len(blob)

    @classmethod
    def read(cls, path) -> "Bitstream":
        try:
            blob = Path(path).read_bytes()
        except OSError as e:
            raise FormatError(f"Cannot read bitstream {path}: {e}") from e
        return cls.from_bytes(blob)
