"""Desk-scale training runs on synthetic clips; each variant is trained once per module."""

import numpy as np
import pytest

from helpers import tiny_config
from roicodec.common.utils import make_rng
from roicodec.operators.codec.api import VideoClip, bit_allocation_map, encode_clip
from roicodec.operators.evaluation.api import evaluate_model, gain_overhead
from roicodec.operators.trainer.api import train
from roicodec.operators.trainer.config import TrainConfig
from roicodec.operators.trainer.data import SyntheticShapesDataset

pytestmark = pytest.mark.slow

SIZE = 32


class LeftHalfMasks:
    """Synthetic clips whose ROI is always the left half of the frame."""

    def __init__(self, dataset):
        self.dataset = dataset

    def sample(self, rng):
        frames, masks = self.dataset.sample(rng)
        masks[:] = 0
        masks[..., : masks.shape[-1] // 2] = 1
        return frames, masks


def experiment_config(variant):
    return TrainConfig(
        variant=variant,
        roi_loss=variant != "ssf",
        beta=3e-4,
        gamma=30.0,
        steps=800,
        lr=1e-3,
        batch=4,
        frames_per_example=2,
        log_every=100,
        seed=11,
    )


@pytest.fixture(scope="module")
def trained():
    dataset = LeftHalfMasks(SyntheticShapesDataset(SIZE, SIZE, 2))
    runs = {}

    def get(variant):
        if variant not in runs:
            model_config = tiny_config(latent_channels=12, gain_latent_channels=3, gop_size=3)
            runs[variant] = train(dataset, experiment_config(variant), model_config)
        return runs[variant]

    return get


@pytest.fixture(scope="module")
def clips():
    # every clip also appears mirrored, so left and right halves see the same content
    dataset = LeftHalfMasks(SyntheticShapesDataset(SIZE, SIZE, 3))
    rng = make_rng(99)
    out = []
    for _ in range(6):
        frames, masks = dataset.sample(rng)
        for view in (frames, frames[..., ::-1].copy()):
            out.append(VideoClip([f[None] for f in view], list(masks)))
    return out


@pytest.mark.parametrize("variant", ["ssf", "implicit", "latent_scaling"])
def test_training_lowers_the_roi_error(trained, variant):
    history = trained(variant).history
    early = history["mse_roi"].iloc[:50].mean()
    late = history["mse_roi"].iloc[-50:].mean()
    assert late < 0.8 * early


def test_latent_scaling_spends_more_bits_in_the_roi(trained, clips):
    model = trained("latent_scaling").model
    left, right = [], []
    for clip in clips:
        bitstream = encode_clip(clip, model).bitstream
        for index in range(len(clip)):
            cells = bit_allocation_map(bitstream, model, index, masks=clip.masks).bpp
            half = cells.shape[1] // 2
            left.append(cells[:, :half].mean())
            right.append(cells[:, half:].mean())
    assert np.mean(left) > np.mean(right)


def test_gain_latents_are_a_small_share_of_the_rate(trained, clips):
    reports = []
    evaluate_model(trained("latent_scaling").model, clips, reports=reports)
    assert 0 < gain_overhead(reports) < 0.25


@pytest.mark.parametrize("variant", ["implicit", "latent_scaling"])
def test_roi_variants_favour_the_roi_over_the_baseline(trained, clips, variant):
    baseline = evaluate_model(trained("ssf").model, clips, label="ssf")
    roi = evaluate_model(trained(variant).model, clips, label=variant)
    assert abs(baseline.roi_psnr - baseline.nonroi_psnr) <= 0.5
    assert roi.roi_psnr - roi.nonroi_psnr >= 2.0
