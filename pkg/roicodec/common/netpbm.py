"""Frame, mask and label-map I/O in Netpbm formats.

Frames are binary PPM (P6, 8-bit), masks binary PGM (P5, values 0/255) and
label maps 8- or 16-bit PGM. Arrays handed back follow the tensor layout:
frames 1x3xHxW float32 in [0, 1], masks HxW uint8 in {0, 1}.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from roicodec.base.exceptions import FormatError

logger = logging.getLogger(__name__)


def _open(path) -> Image.Image:
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    if img.format != "PPM":
        raise FormatError(f"{path} is not a Netpbm file (found {img.format})")
    return img


def read_frame(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected P6 RGB frame, got mode {img.mode}")
    data = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(data.transpose(2, 0, 1)[None])


def write_frame(frame: np.ndarray, path) -> None:
    """Quantize a 1x3xHxW frame to 8 bits (clipping to [0, 1]) and write it as P6."""
    rgb = np.clip(np.asarray(frame, dtype=np.float64)[0].transpose(1, 2, 0), 0.0, 1.0)
    pixels = np.floor(rgb * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(pixels, "RGB").save(path, format="PPM")


def read_mask(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "L":
        raise FormatError(f"{path}: expected 8-bit P5 mask, got mode {img.mode}")
    values = np.asarray(img)
    if not np.isin(values, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return (values == 255).astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    values = np.asarray(mask)
    Image.fromarray((values > 0).astype(np.uint8) * 255, "L").save(path, format="PPM")


def read_label_map(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("L", "I", "I;16", "I;16B"):
        raise FormatError(f"{path}: expected 8- or 16-bit P5 label map, got mode {img.mode}")
    return np.asarray(img).astype(np.int64)


def sorted_files(directory, suffix: str) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == suffix)
    logger.debug(f"Found {len(files)} {suffix} files in {directory}")
    return files


def read_frame_dir(directory) -> list[np.ndarray]:
    return [read_frame(p) for p in sorted_files(directory, ".ppm")]


def read_mask_dir(directory) -> list[np.ndarray]:
    return [read_mask(p) for p in sorted_files(directory, ".pgm")]


def write_frame_dir(frames, directory, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = directory / f"{prefix}_{i:05d}.ppm"
        write_frame(frame, path)
        paths.append(path)
    return paths


def write_mask_dir(masks, directory, prefix: str = "mask") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, mask in enumerate(masks):
        path = directory / f"{prefix}_{i:05d}.pgm"
        write_mask(mask, path)
        paths.append(path)
    return paths
