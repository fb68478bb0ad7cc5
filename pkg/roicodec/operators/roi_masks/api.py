"""
Binary ROI masks: from instance or class label maps, and synthetic moving blobs
from thresholded Perlin gradient noise.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from roicodec.base.exceptions import ConfigError, ContractError, DimensionError, ParameterError
from roicodec.common.utils import make_rng
from roicodec.operators.roi_masks.config import (
    CITYSCAPES_GROUPS,
    CITYSCAPES_LABELS,
    CITYSCAPES_ROI_NAMES,
    PerlinConfig,
)
from roicodec.operators.tensor_core.api import Tensor

logger = logging.getLogger(__name__)


@dataclass
class RoiMask:
    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionError(f"Mask must be H x W, got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ContractError("Mask values must be 0 or 1")
        self.values = values.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def coverage(self) -> float:
        return float(self.values.mean())

    def as_tensor(self) -> Tensor:
        return Tensor(self.values[None, None].astype(np.float32))


def _check_labels(label_map: np.ndarray) -> np.ndarray:
    label_map = np.asarray(label_map)
    if label_map.ndim != 2:
        raise DimensionError(f"Label map must be H x W, got shape {label_map.shape}")
    if label_map.size and label_map.min() < 0:
        raise ParameterError("Label maps must be non-negative")
    return label_map


def mask_from_instances(label_map: np.ndarray, selected: Optional[Iterable[int]] = None, frame_index: int = 0) -> RoiMask:
    """ROI = pixels of the selected instance ids (every labelled instance by default; 0 is unlabelled)."""
    label_map = _check_labels(label_map)
    if selected is None:
        values = label_map != 0
    else:
        values = np.isin(label_map, list(selected))
    return RoiMask(values.astype(np.uint8), frame_index)


def mask_from_classes(class_map: np.ndarray, roi_classes: Iterable[int], frame_index: int = 0) -> RoiMask:
    class_map = _check_labels(class_map)
    return RoiMask(np.isin(class_map, list(roi_classes)).astype(np.uint8), frame_index)


def class_ids(names: Iterable[str], labels: Mapping[str, int] = CITYSCAPES_LABELS, groups=CITYSCAPES_GROUPS) -> set[int]:
    ids = set()
    for name in names:
        if name in groups:
            ids.update(labels[member] for member in groups[name])
        elif name in labels:
            ids.add(labels[name])
        else:
            raise ConfigError(f"Unknown class name '{name}'")
    return ids


def mask_from_class_names(
    class_map: np.ndarray,
    names: Iterable[str] = CITYSCAPES_ROI_NAMES,
    labels: Mapping[str, int] = CITYSCAPES_LABELS,
    frame_index: int = 0,
) -> RoiMask:
    return mask_from_classes(class_map, class_ids(names, labels), frame_index)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


class PerlinField:
    """Sum of gradient-noise octaves on periodic lattices, advected at a fixed velocity."""

    def __init__(self, height: int, width: int, seed: int, config: Optional[PerlinConfig] = None):
        self.config = config or PerlinConfig()
        if self.config.octaves < 1 or self.config.base_cells < 1:
            raise ConfigError("Perlin noise needs at least one octave and one lattice cell")
        self.height = height
        self.width = width
        rng = make_rng(seed, 1)
        angle = rng.uniform(0, 2 * np.pi)
        self.direction = np.array([np.sin(angle), np.cos(angle)])
        self.origin = rng.uniform(0, 1000, size=2)
        self.cell_sizes = []
        self.gradients = []
        short = min(height, width)
        for octave in range(self.config.octaves):
            cells = self.config.base_cells * 2**octave
            cell = short / cells
            lattice = (int(np.ceil(height / cell)) + 1, int(np.ceil(width / cell)) + 1)
            theta = rng.uniform(0, 2 * np.pi, size=lattice)
            self.cell_sizes.append(cell)
            self.gradients.append(np.stack([np.sin(theta), np.cos(theta)], axis=-1))

    def offset(self, t: int) -> np.ndarray:
        return self.origin + t * self.config.velocity * self.direction

    def _octave(self, gradients: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        gy, gx = gradients.shape[:2]
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        fy = ys - y0
        fx = xs - x0
        total = np.zeros(ys.shape)
        for dy in (0, 1):
            wy = _fade(fy) if dy else 1 - _fade(fy)
            for dx in (0, 1):
                wx = _fade(fx) if dx else 1 - _fade(fx)
                g = gradients[(y0 + dy) % gy, (x0 + dx) % gx]
                dot = g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)
                total += wy * wx * dot
        return total

    def noise(self, offset: np.ndarray) -> np.ndarray:
        """Raw noise for pixel positions shifted by `offset` (pixels, (dy, dx))."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        total = np.zeros((self.height, self.width))
        norm = 0.0
        for octave, (cell, gradients) in enumerate(zip(self.cell_sizes, self.gradients)):
            amplitude = self.config.persistence**octave
            total += amplitude * self._octave(gradients, (rows + offset[0]) / cell, (cols + offset[1]) / cell)
            norm += amplitude
        return total / norm

    def field(self, t: int) -> np.ndarray:
        """Noise mapped to [0, 1] for frame t."""
        return np.clip((self.noise(self.offset(t)) + 1.0) / 2.0, 0.0, 1.0)


def perlin_masks(height: int, width: int, frames: int, seed: int, config: Optional[PerlinConfig] = None) -> list[RoiMask]:
    if frames < 1:
        raise ParameterError(f"Need at least one frame, got {frames}")
    field = PerlinField(height, width, seed, config)
    threshold = field.config.threshold
    masks = [RoiMask((field.field(t) > threshold).astype(np.uint8), t) for t in range(frames)]
    logger.debug(f"Generated {frames} Perlin masks {height}x{width}, mean coverage {np.mean([m.coverage for m in masks]):.3f}")
    return masks
