"""
RNVC weight files.

Layout (all integers little-endian):
    b"RNVC" | u16 version | records...
    record = u32 name length | UTF-8 name | 4 x u32 shape | f32 data (row-major)
Records run until end of file.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from roicodec.base.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"RNVC"
VERSION = 1
_HEADER = struct.Struct("<4sH")
_NAME_LEN = struct.Struct("<I")
_SHAPE = struct.Struct("<4I")


def weights_to_bytes(params: dict[str, np.ndarray]) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, VERSION))
    for name, value in params.items():
        value = np.asarray(value)
        if value.ndim != 4:
            raise FormatError(f"Parameter '{name}' must be 4-D, got shape {value.shape}")
        encoded = name.encode("utf-8")
        out += _NAME_LEN.pack(len(encoded))
        out += encoded
        out += _SHAPE.pack(*value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    return bytes(out)


def weights_from_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise FormatError("Weight file too short for header")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad weight file magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"Unsupported weight file version {version}")
    params = {}
    offset = _HEADER.size
    while offset < len(blob):
        try:
            (name_len,) = _NAME_LEN.unpack_from(blob, offset)
            offset += _NAME_LEN.size
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            shape = _SHAPE.unpack_from(blob, offset)
            offset += _SHAPE.size
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatError(f"Corrupt weight record at byte {offset}: {e}") from e
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"Truncated data for parameter '{name}'")
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    return params


def save_weights(params: dict[str, np.ndarray], path) -> bytes:
    blob = weights_to_bytes(params)
    Path(path).write_bytes(blob)
    logger.info(f"Wrote {len(params)} parameters ({len(blob)} bytes) to {path}")
    return blob


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read weights {path}: {e}") from e
    return weights_from_bytes(blob)
