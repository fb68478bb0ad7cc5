"""
Scalar quantization with a spatially varying bin width.

Symbols are mean-centred, k = round((z - mu) / h), and dequantize to k * h + mu.
Ties round away from zero so encoder and decoder agree bit for bit.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from roicodec.base.exceptions import ContractError, DimensionError, ParameterError
from roicodec.operators.tensor_core.api import Tensor, get_dtype

logger = logging.getLogger(__name__)


@dataclass
class QuantizedLatent:
    values: Tensor
    symbols: np.ndarray
    binwidth: Tensor
    mean: Tensor

    @property
    def shape(self):
        return self.values.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def unit_binwidth(like: Tensor) -> Tensor:
    return Tensor(np.ones(like.shape, dtype=like.data.dtype))


def _check(z: Tensor, mu: Tensor, h: Tensor) -> None:
    if z.shape != mu.shape or z.shape != h.shape:
        raise DimensionError(f"Latent {z.shape}, mean {mu.shape} and bin width {h.shape} must have equal shapes")
    if np.any(h.data < 1):
        raise ContractError(f"Bin width must be >= 1 everywhere, min is {float(h.data.min())}")


def dequantize(symbols: np.ndarray, mu: Tensor, h: Optional[Tensor] = None) -> QuantizedLatent:
    h = unit_binwidth(mu) if h is None else h
    values = symbols.astype(np.float64) * h.data.astype(np.float64) + mu.data.astype(np.float64)
    return QuantizedLatent(Tensor(values.astype(get_dtype())), symbols.astype(np.int32), h, mu)


def quantize_eval(z: Tensor, mu: Tensor, h: Optional[Tensor] = None) -> QuantizedLatent:
    h = unit_binwidth(z) if h is None else h
    _check(z, mu, h)
    scaled = (z.data.astype(np.float64) - mu.data.astype(np.float64)) / h.data.astype(np.float64)
    symbols = round_half_away(scaled)
    if np.abs(symbols).max(initial=0) > np.iinfo(np.int32).max:
        raise ContractError("Quantized symbols overflow int32")
    return dequantize(symbols.astype(np.int32), mu, h)


def quantize_train(
    z: Tensor,
    mu: Tensor,
    h: Optional[Tensor] = None,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> Tensor:
    """Additive-noise proxy for rounding: ((z - mu) / h + u) * h + mu with u ~ U(-1/2, 1/2).

    The expression collapses to z + u * h, which is what gets recorded. Pass `noise`
    to fix u (zeros reproduce z exactly).
    """
    h = unit_binwidth(z) if h is None else h
    _check(z, mu, h)
    if noise is None:
        if rng is None:
            raise ParameterError("quantize_train needs an rng or an explicit noise array")
        noise = rng.uniform(-0.5, 0.5, size=z.shape)
    elif noise.shape != z.shape:
        raise DimensionError(f"Noise shape {noise.shape} does not match latent {z.shape}")
    return z + Tensor(noise.astype(get_dtype())) * h


def apply_gain_amplifier(h: Tensor, ga: float) -> Tensor:
    """h' = (h - 1) * ga + 1, which keeps h' >= 1 for any ga >= 0."""
    if ga < 0:
        raise ParameterError(f"Gain amplifier must be >= 0, got {ga}")
    if ga == 1:
        return h
    return (h - 1.0) * float(ga) + 1.0
