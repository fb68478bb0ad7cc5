"""
ROI-weighted rate-distortion objective and the training loop.

The distortion of a frame is mean(s * e + (1 - s) * e / gamma) with e the squared
error, averaged over channels and pixels. The rate is the total number of bits of
every latent of the example (gain latents included for latent_scaling), divided by
the pixel count of one frame. The objective is beta * rate + the sum of the
per-frame distortions.
"""

import logging
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from roicodec.base.exceptions import ConfigError, DimensionError, NumericError, ParameterError, TrainingDivergedError
from roicodec.base.types import TrainingRecord
from roicodec.common.utils import make_rng
from roicodec.operators.networks.api import VideoCodecModel, save_model
from roicodec.operators.networks.config import ModelConfig
from roicodec.operators.tensor_core.api import Tape, Tensor, backward, reduce_mean, square
from roicodec.operators.trainer.config import TrainConfig
from roicodec.operators.trainer.data import PrefetchLoader
from roicodec.operators.trainer.optim import Adam

logger = logging.getLogger(__name__)

CURVE_COLUMNS = list(TrainingRecord.__annotations__)


def distortion_loss(x: Tensor, x_hat: Tensor, s: Optional[Tensor] = None, gamma: float = 30.0) -> Tensor:
    """Mask-weighted MSE; non-ROI errors count 1/gamma. Without a mask this is the plain MSE."""
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    if x.shape != x_hat.shape:
        raise DimensionError(f"Frame {x.shape} and reconstruction {x_hat.shape} differ in shape")
    error = square(x - x_hat)
    if s is None:
        return reduce_mean(error)
    if s.shape != (x.shape[0], 1) + x.shape[2:]:
        raise DimensionError(f"Mask {s.shape} does not match frame {x.shape}")
    weight = s + (1.0 - s) * (1.0 / gamma)
    return reduce_mean(error * weight)


def region_mse(x: np.ndarray, x_hat: np.ndarray, s: np.ndarray) -> tuple[float, float]:
    """(ROI MSE, non-ROI MSE) over all channels; NaN for an empty region."""
    error = np.mean((x.astype(np.float64) - x_hat.astype(np.float64)) ** 2, axis=1, keepdims=True)
    roi = s > 0.5
    mse_roi = float(error[roi].mean()) if roi.any() else float("nan")
    mse_nonroi = float(error[~roi].mean()) if (~roi).any() else float("nan")
    return mse_roi, mse_nonroi


@dataclass
class LossBreakdown:
    loss: Tensor
    rate: Tensor
    distortion: Tensor
    bits_main: float
    bits_hyper: float
    bits_gain: float
    mse_roi: float
    mse_nonroi: float
    reconstructions: list[Tensor] = field(default_factory=list)


def _total(terms: list[Tensor]) -> Tensor:
    return reduce(lambda a, b: a + b, terms)


def total_loss(
    frames: Sequence[Tensor],
    masks: Optional[Sequence[Tensor]],
    model: VideoCodecModel,
    beta: float,
    gamma: float,
    rng: np.random.Generator,
    roi_loss: bool = True,
) -> LossBreakdown:
    """Objective for one batch of clips (frame 0 intra coded, the rest P-coded) under the noise proxy."""
    if not frames:
        raise ParameterError("total_loss needs at least one frame")
    if masks is None and (roi_loss or model.variant.uses_mask):
        raise ConfigError("ROI masks are needed for the ROI loss and for mask-aware variants")
    n, _, height, width = frames[0].shape
    bits = {"main": [], "hyper": [], "gain": []}
    distortions = []
    reconstructions = []
    errors = []
    prev = None
    for i, x in enumerate(frames):
        mask = masks[i] if masks is not None else None
        target = "iframe" if i == 0 else "residual"
        h = None
        if model.variant.uses_gain:
            gain = model.gain_forward(mask, target, rng=rng, training=True)
            h = gain.decoded
            bits["gain"].extend(model.gain_ae(target).rate(gain))
        if i == 0:
            out = model.iframe_forward(x, mask, h, rng=rng, training=True)
            recon = out.decoded
            rates = [model.iframe.rate(out)]
        else:
            flow = model.pframe_flow_forward(prev, x, mask, rng=rng, training=True)
            prediction = model.predict(prev, flow.decoded)
            residual = model.pframe_residual_forward(x - prediction, mask, h, rng=rng, training=True)
            recon = prediction + residual.decoded
            rates = [model.flow.rate(flow), model.residual.rate(residual)]
        for main, hyper in rates:
            bits["main"].append(main)
            bits["hyper"].append(hyper)
        distortions.append(distortion_loss(x, recon, mask if roi_loss else None, gamma))
        if mask is not None:
            errors.append(region_mse(x.data, recon.data, mask.data))
        reconstructions.append(recon)
        prev = recon

    rate = _total(bits["main"] + bits["hyper"] + bits["gain"]) * (1.0 / (n * height * width))
    distortion = _total(distortions)
    loss = rate * float(beta) + distortion
    mse_roi, mse_nonroi = np.nanmean(np.array(errors), axis=0) if errors else (float("nan"), float("nan"))

    def per_example(terms):
        return sum(t.item() for t in terms) / n

    return LossBreakdown(
        loss=loss,
        rate=rate,
        distortion=distortion,
        bits_main=per_example(bits["main"]),
        bits_hyper=per_example(bits["hyper"]),
        bits_gain=per_example(bits["gain"]),
        mse_roi=float(mse_roi),
        mse_nonroi=float(mse_nonroi),
        reconstructions=reconstructions,
    )


class DivergenceDetector:
    """Raises once the loss has stayed above `factor` times the first loss for `patience` consecutive steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.streak = 0

    def update(self, step: int, loss: float) -> None:
        if not np.isfinite(loss):
            raise NumericError(f"Non-finite loss {loss} at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        self.streak = self.streak + 1 if loss > self.factor * self.initial else 0
        if self.streak >= self.patience:
            raise TrainingDivergedError(
                f"Loss {loss:.4g} above {self.factor}x the initial {self.initial:.4g} for {self.streak} steps (step {step})"
            )


@dataclass
class TrainResult:
    model: VideoCodecModel
    history: pd.DataFrame


def _prepare_model(config: TrainConfig, model_config: Optional[ModelConfig], model: Optional[VideoCodecModel]):
    if model is None:
        model_config = (model_config or ModelConfig()).update(variant=config.variant, seed=config.seed)
        model = VideoCodecModel(model_config)
    elif model.variant.value != config.variant:
        raise ConfigError(f"Model is '{model.variant.value}', training config asks for '{config.variant}'")
    model.config.update(beta=config.beta, gamma=config.gamma)
    return model


def train(
    dataset,
    config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
    out_dir=None,
    model: Optional[VideoCodecModel] = None,
) -> TrainResult:
    """Optimize a model on `dataset`; with `out_dir`, write checkpoints, the final model and curves.csv."""
    config = (config or TrainConfig()).validate()
    model = _prepare_model(config, model_config, model)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    noise_rng = make_rng(config.seed, 2)
    loader = PrefetchLoader(dataset, config.batch, config.steps, config.seed, config.prefetch, config.threads)
    params = model.parameters()
    optimizer = Adam(params, config.lr, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    detector = DivergenceDetector(config.divergence_factor, config.divergence_patience)
    records: list[TrainingRecord] = []
    logger.info(f"Training {model.variant.value} for {config.steps} steps, beta={config.beta}, gamma={config.gamma}")

    for step, (frames, masks) in enumerate(loader, start=1):
        xs = [Tensor(frames[t]) for t in range(len(frames))]
        ms = [Tensor(masks[t]) for t in range(len(masks))]
        optimizer.zero_grad()
        try:
            with Tape():
                out = total_loss(xs, ms, model, config.beta, config.gamma, noise_rng, config.roi_loss)
            backward(out.loss)
        except NumericError as e:
            raise NumericError(f"Step {step}: {e}") from e
        optimizer.step()
        record = TrainingRecord(
            step=step,
            loss=out.loss.item(),
            bits_main=out.bits_main,
            bits_hyper=out.bits_hyper,
            bits_gain=out.bits_gain,
            mse_roi=out.mse_roi,
            mse_nonroi=out.mse_nonroi,
        )
        records.append(record)
        detector.update(step, record["loss"])
        if step % config.log_every == 0:
            logger.info(
                f"step {step}: loss {record['loss']:.5f}, bits {record['bits_main']:.1f}/{record['bits_hyper']:.1f}"
                f"/{record['bits_gain']:.1f}, mse roi {record['mse_roi']:.5f} non-roi {record['mse_nonroi']:.5f}"
            )
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_model(model, out_dir / f"checkpoint_{step:06d}.rnvc")

    history = pd.DataFrame(records, columns=CURVE_COLUMNS)
    if out_dir is not None:
        save_model(model, out_dir / "model.rnvc")
        history.to_csv(out_dir / "curves.csv", index=False)
    return TrainResult(model, history)
