"""
Gaussian scale-space volumes and trilinear warping through them.

Level 0 is the source frame; level l >= 1 is the source blurred with
sigma_base * 2**(l - 1). Blurs are separable and applied as dense matrices
(B_h @ x @ B_w^T), so the backward pass is the same product with the transposes.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from roicodec.base.exceptions import DimensionError, ParameterError
from roicodec.operators.tensor_core.api import Tensor, custom_op

logger = logging.getLogger(__name__)


@lru_cache(maxsize=64)
def gaussian_blur_matrix(size: int, sigma: float) -> np.ndarray:
    """(size, size) matrix blurring a vector with a reflect-padded Gaussian truncated at ceil(3 sigma)."""
    radius = int(math.ceil(3 * sigma))
    matrix = ndimage.gaussian_filter1d(np.eye(size), sigma, axis=0, mode="reflect", radius=radius)
    matrix.setflags(write=False)
    return matrix


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    if sigma <= 0:
        raise ParameterError(f"Blur sigma must be positive, got {sigma}")
    _, _, h, w = x.shape
    bh = gaussian_blur_matrix(h, sigma)
    bw = gaussian_blur_matrix(w, sigma)
    out = np.einsum("ij,ncjk,lk->ncil", bh, x.data, bw, optimize=True)
    return custom_op(
        "gaussian_blur",
        out,
        (x,),
        lambda g: (np.einsum("ji,ncjk,kl->ncil", bh, g, bw, optimize=True),),
    )


@dataclass
class ScaleSpaceVolume:
    levels: list[Tensor]
    sigmas: list[float]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> Tensor:
        return self.levels[-1]


def level_sigmas(levels: int, sigma_base: float) -> list[float]:
    return [0.0] + [sigma_base * 2 ** (level - 1) for level in range(1, levels)]


def build_volume(x: Tensor, levels: int = 4, sigma_base: float = 1.5) -> ScaleSpaceVolume:
    if levels < 2:
        raise ParameterError(f"A scale-space volume needs at least 2 levels, got {levels}")
    if sigma_base <= 0:
        raise ParameterError(f"sigma_base must be positive, got {sigma_base}")
    sigmas = level_sigmas(levels, sigma_base)
    return ScaleSpaceVolume([x] + [gaussian_blur(x, s) for s in sigmas[1:]], sigmas)


def _corners(coord: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Clamp `coord` to [0, size - 1]; return lower index, upper index, weight of upper, and inside mask."""
    inside = (coord >= 0) & (coord <= size - 1)
    c = np.clip(coord, 0, size - 1)
    lower = np.minimum(np.floor(c), max(size - 2, 0)).astype(np.int64)
    upper = np.minimum(lower + 1, size - 1)
    weight = c - lower
    return lower, upper, weight, inside


def warp(volume: ScaleSpaceVolume, g: Tensor) -> Tensor:
    """Trilinear sample of the volume at (x + dx, y + dy, s) for every pixel.

    g holds (dx, dy, s) in its three channels; s is already in [0, L-1] level units.
    Sampling clamps to the border in all three directions.
    """
    first = volume.levels[0]
    n, c, h, w = first.shape
    if g.shape != (n, 3, h, w):
        raise DimensionError(f"Flow must have shape {(n, 3, h, w)}, got {g.shape}")
    num_levels = volume.num_levels
    vol = np.stack([level.data for level in volume.levels], axis=1).transpose(0, 1, 3, 4, 2)  # n, l, h, w, c

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs = cols[None] + g.data[:, 0].astype(np.float64)
    ys = rows[None] + g.data[:, 1].astype(np.float64)
    ss = g.data[:, 2].astype(np.float64)
    x0, x1, wx, in_x = _corners(xs, w)
    y0, y1, wy, in_y = _corners(ys, h)
    s0, s1, ws, in_s = _corners(ss, num_levels)
    batch = np.broadcast_to(np.arange(n)[:, None, None], xs.shape)

    corners = []
    for si, fs in ((s0, 1 - ws), (s1, ws)):
        for yi, fy in ((y0, 1 - wy), (y1, wy)):
            for xi, fx in ((x0, 1 - wx), (x1, wx)):
                corners.append((si, yi, xi, fs, fy, fx))

    out = np.zeros((n, h, w, c))
    for si, yi, xi, fs, fy, fx in corners:
        out += (fs * fy * fx)[..., None] * vol[batch, si, yi, xi]

    def backward_fn(grad):
        g_nhwc = grad.transpose(0, 2, 3, 1).astype(np.float64)
        grad_vol = np.zeros(vol.shape, dtype=np.float64)
        dx = np.zeros(xs.shape)
        dy = np.zeros(xs.shape)
        ds = np.zeros(xs.shape)
        for si, yi, xi, fs, fy, fx in corners:
            np.add.at(grad_vol, (batch, si, yi, xi), (fs * fy * fx)[..., None] * g_nhwc)
            sample = (vol[batch, si, yi, xi] * g_nhwc).sum(axis=-1)
            sign_x = 1.0 if xi is x1 else -1.0
            sign_y = 1.0 if yi is y1 else -1.0
            sign_s = 1.0 if si is s1 else -1.0
            dx += sign_x * fs * fy * sample
            dy += sign_y * fs * fx * sample
            ds += sign_s * fy * fx * sample
        grad_g = np.stack([dx * in_x, dy * in_y, ds * in_s], axis=1)
        level_grads = [grad_vol[:, level].transpose(0, 3, 1, 2) for level in range(num_levels)]
        return level_grads + [grad_g]

    return custom_op("warp", out.transpose(0, 3, 1, 2), list(volume.levels) + [g], backward_fn)
