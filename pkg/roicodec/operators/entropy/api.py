"""
Probability models for quantized latents and the rates they imply.

`ScaledGaussianModel` is the mean-scale prior of the main latents under latent
scaling: a symbol k covers the bin [k*h + mu - h/2, k*h + mu + h/2] of N(mu, sigma),
so its mass only depends on sigma / h. `FactorizedModel` is the learned per-channel
density used for hyper-latents. Both hand out integer CDF tables for the range
coder and differentiable likelihoods for training.
"""

import logging
import math
from typing import Optional, Union

import numpy as np
from scipy import special

from roicodec.base.exceptions import ConfigError, DimensionError, NumericError, ParameterError
from roicodec.operators.entropy.config import EntropyConfig
from roicodec.operators.entropy.range_coder import Bitchunk, range_decode, range_encode
from roicodec.operators.quantizer.api import QuantizedLatent
from roicodec.operators.tensor_core.api import (
    Tensor,
    abs_,
    clamp_min,
    crop,
    dtype_scope,
    log,
    no_grad,
    normal_cdf,
    reduce_sum,
    sigmoid,
    softplus,
    tanh,
)
from roicodec.operators.tensor_core.module import Module

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)


def _interval_mass(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Phi(hi) - Phi(lo), evaluated on the tail where it does not cancel."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))
    upper_tail = lo > 0
    return np.where(upper_tail, special.ndtr(-lo) - special.ndtr(-hi), special.ndtr(hi) - special.ndtr(lo))


def scaled_gaussian_pmf(k, mu, sigma, h) -> np.ndarray:
    """Mass of N(mu, sigma) over the bin of symbol k on a grid of width h (all in float64)."""
    k = np.asarray(k, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    offset = mu / h
    return _interval_mass((k - 0.5 - offset) * h / sigma, (k + 0.5 - offset) * h / sigma)


def cdf_quantize(pmf: np.ndarray, precision_bits: int = 16) -> np.ndarray:
    """Integer CDF (length len(pmf) + 1, last entry 2**precision_bits) with every frequency >= 1.

    Frequencies are round(pmf * 2**precision_bits) floored at 1; the surplus or deficit is
    taken from (or given to) the most probable symbol, repeatedly if one pass is not enough.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    total = 1 << precision_bits
    if pmf.ndim != 1 or pmf.size == 0:
        raise ParameterError(f"pmf must be a non-empty vector, got shape {pmf.shape}")
    if pmf.size > total:
        raise ConfigError(f"Coding window of {pmf.size} symbols does not fit {precision_bits}-bit precision")
    if abs(pmf.sum() - 1.0) > 1e-6:
        raise ParameterError(f"pmf sums to {pmf.sum():.9f}, expected 1")
    freq = np.maximum(1, np.rint(pmf * total)).astype(np.int64)
    diff = total - int(freq.sum())
    while diff != 0:
        i = int(np.argmax(freq))
        if diff > 0:
            freq[i] += diff
            diff = 0
        else:
            take = min(-diff, int(freq[i]) - 1)
            freq[i] -= take
            diff += take
    cdf = np.zeros(pmf.size + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def gaussian_window(scale: float, tail_cells: int) -> int:
    """Half-width (in symbols) of the coding window for sigma / h = scale."""
    return int(math.ceil(tail_cells * (scale + 1.0)))


def gaussian_table(scale: float, tail_cells: int, precision_bits: int) -> tuple[int, np.ndarray]:
    n = gaussian_window(scale, tail_cells)
    k = np.arange(-n, n + 1, dtype=np.float64)
    lo = (k - 0.5) / scale
    hi = (k + 0.5) / scale
    lo[0] = -np.inf
    hi[-1] = np.inf
    pmf = _interval_mass(lo, hi)
    return n, cdf_quantize(pmf, precision_bits)


class ScaledGaussianModel:
    """Discretized Gaussian prior for mean-centred symbols with bin width h."""

    def __init__(self, mu: Tensor, sigma: Tensor, h: Optional[Tensor] = None, config: Optional[EntropyConfig] = None):
        if mu.shape != sigma.shape or (h is not None and h.shape != mu.shape):
            raise DimensionError(f"Prior parameters disagree in shape: {mu.shape}, {sigma.shape}")
        self.mu = mu
        self.sigma = sigma
        self.h = h
        self.config = config or EntropyConfig()
        self._tables: Optional[list[tuple[int, np.ndarray]]] = None

    @property
    def shape(self):
        return self.mu.shape

    def scales(self) -> np.ndarray:
        """sigma / h per element in float64, capped at `scale_max`; the only quantity the discrete pmf depends on."""
        sigma = np.maximum(self.sigma.data.astype(np.float64), self.config.sigma_min)
        if self.h is not None:
            sigma = sigma / self.h.data.astype(np.float64)
        return np.minimum(sigma, self.config.scale_max)

    def tables(self) -> list[tuple[int, np.ndarray]]:
        """(half-width n, integer CDF over symbols -n..n) per element in C order.

        Built once per model; elements with equal scales share one table.
        """
        if self._tables is None:
            unique, inverse = np.unique(self.scales().ravel(), return_inverse=True)
            built = [gaussian_table(float(s), self.config.tail_cells, self.config.precision_bits) for s in unique]
            self._tables = [built[i] for i in inverse.ravel()]
        return self._tables

    def clamp(self, symbols: np.ndarray) -> np.ndarray:
        windows = np.array([n for n, _ in self.tables()]).reshape(self.shape)
        return np.clip(symbols, -windows, windows).astype(np.int32)

    def symbol_bits(self, symbols: np.ndarray) -> np.ndarray:
        """Ideal code length of each (clamped) symbol under the quantized frequencies."""
        total = 1 << self.config.precision_bits
        bits = np.empty(symbols.size, dtype=np.float64)
        for i, (s, (n, cdf)) in enumerate(zip(symbols.ravel(), self.tables())):
            idx = int(s) + n
            bits[i] = -math.log2((cdf[idx + 1] - cdf[idx]) / total)
        return bits.reshape(symbols.shape)

    def likelihood(self, y: Tensor) -> Tensor:
        """Differentiable mass of the bin of width h centred on y under N(mu, sigma)."""
        sigma = clamp_min(self.sigma, self.config.sigma_min)
        h = self.h if self.h is not None else Tensor.ones(y.shape)
        dist = abs_(y - self.mu)
        half = h * 0.5
        upper = normal_cdf((half - dist) / sigma)
        lower = normal_cdf((-half - dist) / sigma)
        return upper - lower

    def encode(self, symbols: np.ndarray) -> Bitchunk:
        tables = self.tables()
        indexes = [int(s) + n for s, (n, _) in zip(symbols.ravel(), tables)]
        return range_encode(indexes, [cdf for _, cdf in tables], self.config.precision_bits)

    def decode(self, chunk: Bitchunk) -> np.ndarray:
        tables = self.tables()
        indexes = range_decode(chunk, [cdf for _, cdf in tables], self.config.precision_bits)
        symbols = np.array([i - n for i, (n, _) in zip(indexes, tables)], dtype=np.int32)
        return symbols.reshape(self.shape)


class FactorizedModel(Module):
    """Per-channel monotone CDF network for hyper-latents (widths 1-3-3-3-1).

    Each layer is softplus(matrix) @ u + bias followed, except for the last, by
    u + tanh(factor) * tanh(u); the CDF is sigmoid of the output.
    """

    def __init__(self, channels: int, config: Optional[EntropyConfig] = None, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config or EntropyConfig()
        self.channels = channels
        rng = rng or np.random.default_rng(0)
        filters = (1,) + tuple(self.config.factorized_filters) + (1,)
        self.filters = filters
        scale = self.config.factorized_init_scale ** (1.0 / (len(filters) - 1))
        for i in range(len(filters) - 1):
            d_in, d_out = filters[i], filters[i + 1]
            init = math.log(math.expm1(1.0 / scale / d_out))
            self.param(f"matrix{i}", np.full((1, channels, d_out, d_in), init))
            self.param(f"bias{i}", rng.uniform(-0.5, 0.5, size=(1, channels, d_out, 1)))
            if i < len(filters) - 2:
                self.param(f"factor{i}", np.zeros((1, channels, d_out, 1)))

    def _logits(self, x: Tensor) -> Tensor:
        units = [x]
        for i in range(len(self.filters) - 1):
            d_in, d_out = self.filters[i], self.filters[i + 1]
            matrix = softplus(getattr(self, f"matrix{i}"))
            bias = getattr(self, f"bias{i}")
            out = []
            for j in range(d_out):
                acc = crop(bias, h=(j, j + 1))
                for k in range(d_in):
                    acc = acc + crop(matrix, h=(j, j + 1), w=(k, k + 1)) * units[k]
                if i < len(self.filters) - 2:
                    factor = tanh(crop(getattr(self, f"factor{i}"), h=(j, j + 1)))
                    acc = acc + factor * tanh(acc)
                out.append(acc)
            units = out
        return units[0]

    def cdf(self, x: Tensor) -> Tensor:
        return sigmoid(self._logits(x))

    def likelihood(self, y: Tensor) -> Tensor:
        if y.shape[1] != self.channels:
            raise DimensionError(f"Model has {self.channels} channels, input has {y.shape[1]}")
        lower = self._logits(y - 0.5)
        upper = self._logits(y + 0.5)
        # evaluate on the side of the median where the sigmoids do not saturate together
        sign = -np.sign(lower.data + upper.data)
        sign[sign == 0] = 1.0
        s = Tensor(sign)
        return abs_(sigmoid(upper * s) - sigmoid(lower * s))

    def _grid_cdf(self, half_points: np.ndarray) -> np.ndarray:
        """CDF of every channel at the given points, in float64; returns (channels, points)."""
        with dtype_scope(np.float64), no_grad():
            grid = Tensor(np.broadcast_to(half_points, (1, self.channels, 1, half_points.size)).copy())
            values = self.cdf(grid).data
        return values[0, :, 0, :]

    def tables(self) -> list[tuple[int, np.ndarray]]:
        """(lowest symbol, integer CDF) per channel, tails folded into the end symbols."""
        radius = 8
        tail = self.config.factorized_tail_mass
        while True:
            k = np.arange(-radius, radius + 1, dtype=np.float64)
            edges = self._grid_cdf(np.concatenate([k - 0.5, [radius + 0.5]]))
            done = (edges[:, 0] < tail).all() and (edges[:, -1] > 1 - tail).all()
            if done or radius >= self.config.factorized_max_range:
                break
            radius *= 2
        tables = []
        for c in range(self.channels):
            lo_edge = edges[c, :-1]
            hi_edge = edges[c, 1:]
            first = int(np.searchsorted(hi_edge, tail, side="left"))
            last = int(np.searchsorted(lo_edge, 1 - tail, side="left")) - 1
            first = min(first, len(k) - 1)
            last = max(last, first)
            pmf = hi_edge[first : last + 1] - lo_edge[first : last + 1]
            pmf[0] = hi_edge[first]
            pmf[-1] = 1.0 - lo_edge[last] if last > first else 1.0
            tables.append((int(k[first]), cdf_quantize(pmf, self.config.precision_bits)))
        return tables

    def _per_element(self, shape) -> list[tuple[int, np.ndarray]]:
        tables = self.tables()
        return [tables[c] for c in np.broadcast_to(np.arange(shape[1])[None, :, None, None], shape).ravel()]

    def clamp(self, symbols: np.ndarray) -> np.ndarray:
        tables = self.tables()
        lows = np.array([lo for lo, _ in tables])[None, :, None, None]
        highs = np.array([lo + len(cdf) - 2 for lo, cdf in tables])[None, :, None, None]
        return np.clip(symbols, lows, highs).astype(np.int32)

    def symbol_bits(self, symbols: np.ndarray) -> np.ndarray:
        total = 1 << self.config.precision_bits
        bits = np.empty(symbols.size, dtype=np.float64)
        for i, (s, (lo, cdf)) in enumerate(zip(symbols.ravel(), self._per_element(symbols.shape))):
            idx = int(s) - lo
            bits[i] = -math.log2((cdf[idx + 1] - cdf[idx]) / total)
        return bits.reshape(symbols.shape)

    def encode(self, symbols: np.ndarray) -> Bitchunk:
        tables = self._per_element(symbols.shape)
        indexes = [int(s) - lo for s, (lo, _) in zip(symbols.ravel(), tables)]
        return range_encode(indexes, [cdf for _, cdf in tables], self.config.precision_bits)

    def decode(self, chunk: Bitchunk, shape) -> np.ndarray:
        tables = self._per_element(shape)
        indexes = range_decode(chunk, [cdf for _, cdf in tables], self.config.precision_bits)
        return np.array([i + lo for i, (lo, _) in zip(indexes, tables)], dtype=np.int32).reshape(shape)


EntropyModel = Union[ScaledGaussianModel, FactorizedModel]


def rate_bits(latent: Union[QuantizedLatent, Tensor], model: EntropyModel, floor: Optional[float] = None) -> Tensor:
    """-sum log2 P of a latent.

    A `QuantizedLatent` is priced with the coder's quantized frequencies (not differentiable);
    a noisy training proxy is priced with the continuous bin likelihood.
    """
    if isinstance(latent, QuantizedLatent):
        return Tensor.scalar(float(model.symbol_bits(latent.symbols).sum()))
    if isinstance(model, ScaledGaussianModel) and latent.shape != model.shape:
        raise DimensionError(f"Latent {latent.shape} does not match model {model.shape}")
    floor = floor if floor is not None else EntropyConfig.likelihood_floor
    likelihood = model.likelihood(latent)
    if floor <= 0 and (likelihood.data <= 0).any():
        raise NumericError("Zero probability in rate estimate")
    return reduce_sum(log(clamp_min(likelihood, floor))) * (-1.0 / _LN2)


def estimated_rate(sigma, h=None, config: Optional[EntropyConfig] = None) -> float:
    """Entropy in bits of the discretized prior over the coding window, summed over elements."""
    config = config or EntropyConfig()
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), config.sigma_min)
    scales = sigma if h is None else sigma / np.asarray(h, dtype=np.float64)
    scales = np.minimum(scales, config.scale_max)
    total = 0.0
    for scale in np.ravel(scales):
        n = gaussian_window(float(scale), config.tail_cells)
        k = np.arange(-n, n + 1, dtype=np.float64)
        lo, hi = (k - 0.5) / scale, (k + 0.5) / scale
        lo[0], hi[-1] = -np.inf, np.inf
        p = _interval_mass(lo, hi)
        p = p[p > 0]
        total += float(-(p * np.log2(p)).sum())
    return total
