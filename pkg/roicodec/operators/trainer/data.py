"""
Training data: synthetic moving-shape clips and directories of PPM/PGM clips.

A dataset hands out examples as (frames F x 3 x H x W float32, masks F x H x W uint8).
`PrefetchLoader` stacks them into batches on a pool of worker threads.
"""

import logging
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path
from typing import Iterator

import numpy as np

from roicodec.base.exceptions import ConfigError, DimensionError, FormatError
from roicodec.common.netpbm import read_frame_dir, read_mask_dir
from roicodec.common.utils import make_rng
from roicodec.operators.roi_masks.api import perlin_masks

logger = logging.getLogger(__name__)

Example = tuple[np.ndarray, np.ndarray]

BATCH_STREAM = 3


class SyntheticShapesDataset:
    """Textured gradient backgrounds with a few rectangles and discs moving at constant velocity.

    With mask_source="shapes" the ROI is the union of the shapes; with "perlin" it is a
    moving Perlin mask unrelated to the content.
    """

    def __init__(self, height: int, width: int, frames: int, mask_source: str = "shapes", max_shapes: int = 3):
        if mask_source not in ("shapes", "perlin"):
            raise ConfigError(f"Unknown mask source '{mask_source}'")
        self.height = height
        self.width = width
        self.frames = frames
        self.mask_source = mask_source
        self.max_shapes = max_shapes

    def _background(self, rng: np.random.Generator, ys, xs) -> tuple[np.ndarray, np.ndarray]:
        a, b = rng.uniform(0.1, 0.9, size=(2, 3, 1, 1))
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xs / self.width + np.sin(angle) * ys / self.height + 1) / 2
        texture = rng.normal(scale=0.03, size=(3, self.height, self.width))
        return a + (b - a) * ramp, texture

    def sample(self, rng: np.random.Generator) -> Example:
        h, w = self.height, self.width
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        background, texture = self._background(rng, ys, xs)
        count = int(rng.integers(1, self.max_shapes + 1))
        shapes = []
        for _ in range(count):
            shapes.append(
                {
                    "disc": bool(rng.integers(0, 2)),
                    "center": rng.uniform((0, 0), (h, w)),
                    "size": rng.uniform(0.1, 0.25) * min(h, w),
                    "velocity": rng.uniform(-2.0, 2.0, size=2),
                    "color": rng.uniform(0, 1, size=(3, 1, 1)),
                }
            )
        frames = np.empty((self.frames, 3, h, w), dtype=np.float32)
        masks = np.zeros((self.frames, h, w), dtype=np.uint8)
        for t in range(self.frames):
            frame = background + np.roll(texture, t, axis=2)
            for shape in shapes:
                cy, cx = shape["center"] + t * shape["velocity"]
                if shape["disc"]:
                    inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= shape["size"] ** 2
                else:
                    inside = (np.abs(ys - cy) <= shape["size"]) & (np.abs(xs - cx) <= shape["size"])
                frame = np.where(inside, shape["color"], frame)
                masks[t] |= inside.astype(np.uint8)
            frames[t] = np.clip(frame, 0.0, 1.0)
        if self.mask_source == "perlin":
            masks = np.stack([m.values for m in perlin_masks(h, w, self.frames, int(rng.integers(2**31)))])
        return frames, masks


class FrameDirectoryDataset:
    """Clips stored as <root>/<clip>/frames/*.ppm with <root>/<clip>/masks/*.pgm; random crops and start frames."""

    def __init__(self, root, frames: int, crop: tuple[int, int]):
        self.root = Path(root)
        self.frames = frames
        self.crop = crop
        self.clips = []
        clip_dirs = sorted(p for p in self.root.iterdir() if p.is_dir()) if self.root.is_dir() else []
        for clip_dir in clip_dirs:
            clip_frames = np.concatenate(read_frame_dir(clip_dir / "frames"))
            clip_masks = np.stack(read_mask_dir(clip_dir / "masks"))
            if len(clip_frames) != len(clip_masks):
                raise DimensionError(f"{clip_dir}: {len(clip_frames)} frames but {len(clip_masks)} masks")
            if len(clip_frames) < frames or clip_frames.shape[2] < crop[0] or clip_frames.shape[3] < crop[1]:
                logger.warning(f"Skipping {clip_dir}: too short or smaller than the crop")
                continue
            self.clips.append((clip_frames, clip_masks))
        if not self.clips:
            raise FormatError(f"No usable clips under {self.root}")
        logger.info(f"Loaded {len(self.clips)} clips from {self.root}")

    def sample(self, rng: np.random.Generator) -> Example:
        frames, masks = self.clips[int(rng.integers(len(self.clips)))]
        start = int(rng.integers(0, len(frames) - self.frames + 1))
        top = int(rng.integers(0, frames.shape[2] - self.crop[0] + 1))
        left = int(rng.integers(0, frames.shape[3] - self.crop[1] + 1))
        window = (slice(start, start + self.frames), slice(top, top + self.crop[0]), slice(left, left + self.crop[1]))
        return (
            frames[window[0], :, window[1], window[2]].astype(np.float32),
            masks[window].astype(np.uint8),
        )


def make_batch(dataset, rng: np.random.Generator, size: int) -> Example:
    """(frames F x N x 3 x H x W, masks F x N x 1 x H x W)."""
    examples = [dataset.sample(rng) for _ in range(size)]
    frames = np.stack([e[0] for e in examples], axis=1)
    masks = np.stack([e[1] for e in examples], axis=1)[:, :, None]
    return frames, masks


class PrefetchLoader:
    """Yields `steps` batches built on worker threads, at most `prefetch` batches ahead.

    Batch i is drawn from its own generator seeded with (seed, i), so the sequence does not
    depend on the number of workers or the prefetch depth.
    """

    def __init__(self, dataset, batch: int, steps: int, seed: int, prefetch: int = 2, workers: int = 1):
        if workers < 1:
            raise ConfigError(f"Need at least one data worker, got {workers}")
        self.dataset = dataset
        self.batch = batch
        self.steps = steps
        self.seed = seed
        self.depth = max(1, prefetch, workers)
        self.workers = workers

    def _build(self, step: int) -> Example:
        return make_batch(self.dataset, make_rng(self.seed, BATCH_STREAM, step), self.batch)

    def __iter__(self) -> Iterator[Example]:
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="prefetch") as pool:
            pending: deque[Future] = deque()
            submitted = 0
            try:
                for _ in range(self.steps):
                    while submitted < self.steps and len(pending) < self.depth:
                        pending.append(pool.submit(self._build, submitted))
                        submitted += 1
                    yield pending.popleft().result()
            finally:
                for future in pending:
                    future.cancel()
