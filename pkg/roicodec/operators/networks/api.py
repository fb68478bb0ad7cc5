"""
The autoencoders of the ROI codec.

Every path is a mean-scale hyperprior autoencoder: an analysis stack takes the
frame (plus the ROI mask for the mask-aware variants) down by `f_latent`, a hyper
path takes the latent down a further `hyper_downsampling` and predicts the
Gaussian prior (mu, sigma) of every latent element. The gain autoencoders map a
mask to a bin-width tensor h >= 1 shaped like the latent it scales.

Each autoencoder runs in two modes. `forward_train` replaces rounding by
additive noise and keeps everything differentiable; `forward_eval` quantizes,
clamps symbols to the coding windows and reconstructs through the exact path
the decoder takes from symbols (`decode_symbols`).
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from roicodec.base.exceptions import ConfigError, ContractError, DimensionError, FormatError
from roicodec.common.utils import make_rng
from roicodec.operators.entropy.api import FactorizedModel, ScaledGaussianModel, rate_bits
from roicodec.operators.entropy.config import EntropyConfig
from roicodec.operators.entropy.range_coder import Bitchunk
from roicodec.operators.networks.config import ModelConfig
from roicodec.operators.networks.layers import (
    Conv2d,
    Stack,
    UpConv2d,
    downsampling_stack,
    same_resolution_stack,
    upsampling_stack,
)
from roicodec.operators.quantizer.api import QuantizedLatent, dequantize, quantize_eval, quantize_train
from roicodec.operators.scale_space.api import build_volume, warp
from roicodec.operators.tensor_core.api import Tensor, concat, crop, sigmoid, softplus
from roicodec.operators.tensor_core.module import Module
from roicodec.operators.tensor_core.serialization import load_weights, save_weights, weights_to_bytes

logger = logging.getLogger(__name__)

GAIN_TARGETS = ("iframe", "residual")


@dataclass
class AEOutput:
    latent: Optional[Tensor]
    hyperlatent: Optional[Tensor]
    mu: Tensor
    sigma: Tensor
    latent_hat: Tensor
    hyper_hat: Tensor
    decoded: Tensor
    binwidth: Optional[Tensor] = None
    latent_q: Optional[QuantizedLatent] = None
    hyper_q: Optional[QuantizedLatent] = None

    @property
    def quantized(self) -> bool:
        return self.latent_q is not None


def _zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape, dtype=x.data.dtype))


class HyperpriorAE(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        config: ModelConfig,
        rng: np.random.Generator,
        latent_channels: Optional[int] = None,
        entropy_config: Optional[EntropyConfig] = None,
    ):
        super().__init__()
        self.config = config
        self.entropy_config = entropy_config or EntropyConfig(sigma_min=config.sigma_min)
        self.c_in = c_in
        self.c_out = c_out
        self.latent_channels = latent_channels or config.latent_channels
        width, hyper = config.channels, config.hyper_channels
        stages = int(math.log2(config.f_latent))
        hyper_stages = int(math.log2(config.hyper_downsampling))

        self.encoder = downsampling_stack(c_in, width, self.latent_channels, stages, rng)
        self.decoder = self.build_decoder(c_out, stages, rng)
        self.hyper_encoder = Stack(
            [Conv2d(self.latent_channels, width, rng)]
            + [Conv2d(width, hyper if i == hyper_stages - 1 else width, rng, stride=2) for i in range(hyper_stages)]
        )
        self.hyper_decoder = Stack(
            [UpConv2d(hyper if i == 0 else width, width, rng) for i in range(hyper_stages)]
            + [Conv2d(width, 2 * self.latent_channels, rng)]
        )
        self.hyper_prior = FactorizedModel(hyper, self.entropy_config, rng)

    def build_decoder(self, c_out: int, stages: int, rng: np.random.Generator) -> Stack:
        return upsampling_stack(self.latent_channels, self.config.channels, c_out, stages, rng)

    def latent_hw(self, h: int, w: int) -> tuple[int, int]:
        f = self.config.f_latent
        if h % f or w % f:
            raise DimensionError(f"Input {h}x{w} is not a multiple of f_latent={f}; pad frames first")
        return h // f, w // f

    def hyper_hw(self, h: int, w: int) -> tuple[int, int]:
        """Hyper-latent size for a latent of h x w cells."""
        d = self.config.hyper_downsampling
        return -(-h // d), -(-w // d)

    def analysis(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise DimensionError(f"Encoder expects {self.c_in} input channels, got {x.shape[1]}")
        self.latent_hw(*x.shape[2:])
        return self.encoder(x)

    def hyper_analysis(self, z: Tensor) -> Tensor:
        return self.hyper_encoder(z)

    def hyper_synthesis(self, y_hat: Tensor, latent_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
        m = self.latent_channels
        params = crop(self.hyper_decoder(y_hat), h=(0, latent_hw[0]), w=(0, latent_hw[1]))
        mu = crop(params, c=(0, m))
        sigma = softplus(crop(params, c=(m, 2 * m))) + self.config.sigma_min
        return mu, sigma

    def synthesis(self, z_hat: Tensor) -> Tensor:
        return self.decoder(z_hat)

    def forward_train(self, x: Tensor, rng: np.random.Generator, h: Optional[Tensor] = None) -> AEOutput:
        z = self.analysis(x)
        y = self.hyper_analysis(z)
        y_hat = quantize_train(y, _zeros_like(y), rng=rng)
        mu, sigma = self.hyper_synthesis(y_hat, z.shape[2:])
        z_hat = quantize_train(z, mu, h, rng=rng)
        return AEOutput(z, y, mu, sigma, z_hat, y_hat, self.synthesis(z_hat), binwidth=h)

    def forward_eval(self, x: Tensor, h: Optional[Tensor] = None) -> AEOutput:
        z = self.analysis(x)
        y = self.hyper_analysis(z)
        y_symbols = self.hyper_prior.clamp(quantize_eval(y, _zeros_like(y)).symbols)
        y_q = dequantize(y_symbols, _zeros_like(y))
        mu, sigma = self.hyper_synthesis(y_q.values, z.shape[2:])
        prior = ScaledGaussianModel(mu, sigma, h, self.entropy_config)
        z_symbols = prior.clamp(quantize_eval(z, mu, h).symbols)
        out = self._reconstruct(y_q, mu, sigma, z_symbols, h)
        out.latent, out.hyperlatent = z, y
        return out

    def decode_symbols(
        self, hyper_symbols: np.ndarray, latent_symbols: np.ndarray, h: Optional[Tensor] = None
    ) -> AEOutput:
        latent_hw = latent_symbols.shape[2:]
        y_q = dequantize(hyper_symbols, Tensor.zeros(hyper_symbols.shape))
        mu, sigma = self.hyper_synthesis(y_q.values, latent_hw)
        return self._reconstruct(y_q, mu, sigma, latent_symbols, h)

    def encode_chunks(self, out: AEOutput) -> tuple[Bitchunk, Bitchunk]:
        """Range code a quantized output as (hyper chunk, latent chunk)."""
        if not out.quantized:
            raise ContractError("Only quantized outputs can be entropy coded")
        return self.hyper_prior.encode(out.hyper_q.symbols), self.prior(out).encode(out.latent_q.symbols)

    def decode_chunks(
        self, hyper_chunk: Bitchunk, latent_chunk: Bitchunk, latent_hw: tuple[int, int], h: Optional[Tensor] = None
    ) -> AEOutput:
        hyper_shape = (1, self.hyper_prior.channels) + self.hyper_hw(*latent_hw)
        y_q = dequantize(self.hyper_prior.decode(hyper_chunk, hyper_shape), Tensor.zeros(hyper_shape))
        mu, sigma = self.hyper_synthesis(y_q.values, latent_hw)
        z_symbols = ScaledGaussianModel(mu, sigma, h, self.entropy_config).decode(latent_chunk)
        return self._reconstruct(y_q, mu, sigma, z_symbols, h)

    def _reconstruct(self, y_q: QuantizedLatent, mu: Tensor, sigma: Tensor, z_symbols: np.ndarray, h) -> AEOutput:
        z_q = dequantize(z_symbols, mu, h)
        decoded = self.synthesis(z_q.values)
        return AEOutput(None, None, mu, sigma, z_q.values, y_q.values, decoded, h, z_q, y_q)

    def prior(self, out: AEOutput) -> ScaledGaussianModel:
        return ScaledGaussianModel(out.mu, out.sigma, out.binwidth, self.entropy_config)

    def rate(self, out: AEOutput) -> tuple[Tensor, Tensor]:
        """(main-latent bits, hyper-latent bits); exact coder estimates for quantized outputs."""
        if out.quantized:
            return rate_bits(out.latent_q, self.prior(out)), rate_bits(out.hyper_q, self.hyper_prior)
        floor = self.entropy_config.likelihood_floor
        return rate_bits(out.latent_hat, self.prior(out), floor), rate_bits(out.hyper_hat, self.hyper_prior, floor)


class GainHyperpriorAE(HyperpriorAE):
    """Maps an ROI mask to h = 1 + softplus(raw) at latent resolution; the decoder never upsamples."""

    def __init__(self, target_channels: int, config: ModelConfig, rng: np.random.Generator, **kwargs):
        super().__init__(1, target_channels, config, rng, latent_channels=config.gain_latent_channels, **kwargs)

    def build_decoder(self, c_out: int, stages: int, rng: np.random.Generator) -> Stack:
        return same_resolution_stack(self.latent_channels, self.config.channels, c_out, 3, rng)

    def synthesis(self, z_hat: Tensor) -> Tensor:
        return softplus(self.decoder(z_hat)) + 1.0


class VideoCodecModel(Module):
    """All autoencoders of one variant plus the scale-space prediction that links P-frames."""

    def __init__(self, config: Optional[ModelConfig] = None, entropy_config: Optional[EntropyConfig] = None):
        super().__init__()
        self.config = (config or ModelConfig()).validate()
        self.variant = self.config.model_variant
        rng = make_rng(self.config.seed, 0)
        extra = 1 if self.variant.uses_mask else 0
        kwargs = {"entropy_config": entropy_config}
        self.iframe = HyperpriorAE(3 + extra, 3, self.config, rng, **kwargs)
        self.flow = HyperpriorAE(6 + extra, 3, self.config, rng, **kwargs)
        self.residual = HyperpriorAE(3 + extra, 3, self.config, rng, **kwargs)
        if self.variant.uses_gain:
            self.gain_iframe = GainHyperpriorAE(self.config.latent_channels, self.config, rng, **kwargs)
            self.gain_residual = GainHyperpriorAE(self.config.latent_channels, self.config, rng, **kwargs)
        logger.debug(f"Built {self.variant.value} model with {self.num_parameters()} parameters")

    def _with_mask(self, x: Tensor, mask: Optional[Tensor]) -> Tensor:
        if not self.variant.uses_mask:
            return x
        if mask is None:
            raise ConfigError(f"Variant '{self.variant.value}' needs an ROI mask")
        if mask.shape != (x.shape[0], 1) + x.shape[2:]:
            raise DimensionError(f"Mask shape {mask.shape} does not match input {x.shape}")
        return concat([x, mask])

    @staticmethod
    def _run(ae: HyperpriorAE, x: Tensor, h, rng, training: bool) -> AEOutput:
        if training:
            return ae.forward_train(x, rng, h)
        return ae.forward_eval(x, h)

    def iframe_forward(self, x0: Tensor, mask0=None, h=None, rng=None, training: bool = False) -> AEOutput:
        return self._run(self.iframe, self._with_mask(x0, mask0), h, rng, training)

    def pframe_flow_forward(self, x_prev: Tensor, x_i: Tensor, mask_i=None, rng=None, training: bool = False) -> AEOutput:
        """Encode the motion from the previous reconstruction to x_i; `decoded` is the raw flow (dx, dy, scale)."""
        if x_prev.shape != x_i.shape:
            raise DimensionError(f"Previous reconstruction {x_prev.shape} and frame {x_i.shape} differ in shape")
        return self._run(self.flow, self._with_mask(concat([x_prev, x_i]), mask_i), None, rng, training)

    def pframe_residual_forward(self, r: Tensor, mask_i=None, h=None, rng=None, training: bool = False) -> AEOutput:
        return self._run(self.residual, self._with_mask(r, mask_i), h, rng, training)

    def gain_ae(self, which: str) -> GainHyperpriorAE:
        if not self.variant.uses_gain:
            raise ConfigError(f"Variant '{self.variant.value}' has no gain autoencoders")
        if which not in GAIN_TARGETS:
            raise ConfigError(f"Gain target must be one of {GAIN_TARGETS}, got '{which}'")
        return self.gain_iframe if which == "iframe" else self.gain_residual

    def gain_forward(self, mask: Tensor, which: str, rng=None, training: bool = False) -> AEOutput:
        """Gain latent, its prior and the bin widths h (`decoded`) for the I-frame or residual latent."""
        return self._run(self.gain_ae(which), mask, None, rng, training)

    def map_flow(self, g: Tensor) -> Tensor:
        """Raw decoder flow to (dx, dy, s) with s = (L - 1) * sigmoid(raw + flow_scale_offset) in level units."""
        shift = crop(g, c=(0, 2))
        scale = sigmoid(crop(g, c=(2, 3)) + self.config.flow_scale_offset) * float(self.config.scale_levels - 1)
        return concat([shift, scale])

    def predict(self, x_prev: Tensor, g: Tensor) -> Tensor:
        volume = build_volume(x_prev, self.config.scale_levels, self.config.sigma_base)
        return warp(volume, self.map_flow(g))


def model_digest(model: Module) -> bytes:
    return hashlib.sha256(weights_to_bytes(model.state_dict())).digest()


def config_path(weights_path) -> Path:
    return Path(str(weights_path) + ".cfg")


def save_model(model: VideoCodecModel, path) -> bytes:
    """Write weights and the `.cfg` sidecar; returns the SHA-256 of the weight file."""
    blob = save_weights(model.state_dict(), path)
    model.config.write(config_path(path))
    return hashlib.sha256(blob).digest()


def load_model(path, entropy_config: Optional[EntropyConfig] = None) -> VideoCodecModel:
    sidecar = config_path(path)
    if not sidecar.exists():
        raise FormatError(f"Model config {sidecar} not found next to {path}")
    model = VideoCodecModel(ModelConfig.from_file(sidecar), entropy_config)
    model.load_state_dict(load_weights(path))
    logger.info(f"Loaded {model.variant.value} model from {path}")
    return model
