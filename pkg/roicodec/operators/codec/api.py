"""
Clip-level encoding and decoding.

Frame 0 of every GoP goes through the I-frame autoencoder. Every other frame is
predicted by warping the previous reconstruction through the scale-space volume
with the decoded flow, and the prediction error r = x - prediction is coded by
the residual autoencoder. For the latent-scaling variant the gain autoencoder
turns the ROI mask into bin widths h before the I-frame or residual latent is
quantized; the decoder gets the same masks out of band, checks them against the
header digest and against the coded gain symbols, then rebuilds h from the
decoded gain latent.

Both sides reconstruct through the same symbol-driven path, so encoder-side
reconstructions are bit-identical to decoded ones.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from roicodec.base.exceptions import BitstreamError, ConfigError, DimensionError, ParameterError
from roicodec.base.types import ChunkKind, FrameRateReport, FrameType, Variant
from roicodec.common.netpbm import read_frame_dir, read_mask_dir
from roicodec.common.utils import sha256_digest
from roicodec.operators.codec.bitstream import Bitstream, BitstreamHeader, CodedFrame, NO_DIGEST, frame_type
from roicodec.operators.codec.config import CodecConfig
from roicodec.operators.networks.api import AEOutput, HyperpriorAE, VideoCodecModel, model_digest
from roicodec.operators.quantizer.api import apply_gain_amplifier
from roicodec.operators.roi_masks.api import RoiMask
from roicodec.operators.tensor_core.api import Tensor, check_finite, get_dtype, no_grad

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass
class VideoClip:
    frames: list[np.ndarray]
    masks: Optional[list[RoiMask]] = None

    def __post_init__(self):
        if not self.frames:
            raise ParameterError("A clip needs at least one frame")
        self.frames = [np.asarray(f, dtype=np.float32) for f in self.frames]
        shape = self.frames[0].shape
        if len(shape) != 4 or shape[:2] != (1, 3):
            raise DimensionError(f"Frames must be 1x3xHxW, got {shape}")
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise DimensionError(f"Frame {i} has shape {f.shape}, frame 0 has {shape}")
        if self.masks is not None:
            self.masks = [m if isinstance(m, RoiMask) else RoiMask(m, i) for i, m in enumerate(self.masks)]
            if len(self.masks) != len(self.frames):
                raise DimensionError(f"{len(self.masks)} masks for {len(self.frames)} frames")
            for i, m in enumerate(self.masks):
                if m.shape != shape[2:]:
                    raise DimensionError(f"Mask {i} is {m.shape}, frames are {shape[2:]}")

    @property
    def height(self) -> int:
        return self.frames[0].shape[2]

    @property
    def width(self) -> int:
        return self.frames[0].shape[3]

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_directories(cls, frame_dir, mask_dir=None) -> "VideoClip":
        masks = None
        if mask_dir is not None:
            masks = [RoiMask(m, i) for i, m in enumerate(read_mask_dir(mask_dir))]
        return cls(read_frame_dir(frame_dir), masks)


def mask_digest(masks: Sequence[RoiMask]) -> bytes:
    return sha256_digest(np.ascontiguousarray(m.values, dtype=np.uint8).tobytes() for m in masks)


def padded_size(height: int, width: int, multiple: int) -> tuple[int, int]:
    return -(-height // multiple) * multiple, -(-width // multiple) * multiple


def pad_array(x: np.ndarray, height: int, width: int, mode: str = "reflect") -> np.ndarray:
    """Pad the last two axes at the bottom and right to height x width."""
    pad = [(0, 0)] * (x.ndim - 2) + [(0, height - x.shape[-2]), (0, width - x.shape[-1])]
    return np.pad(x, pad, mode=mode)


@dataclass
class FrameResult:
    index: int
    frame_type: FrameType
    reconstruction: Tensor
    outputs: dict[str, AEOutput] = field(default_factory=dict)


@dataclass
class EncodeResult:
    bitstream: Bitstream
    reports: list[FrameRateReport]
    reconstructions: list[np.ndarray]


class _ClipCoder:
    """Runs the frame loop shared by the encoder and the decoder."""

    def __init__(self, model: VideoCodecModel, height: int, width: int, gop_size: int, ga: float, pad_mode: str):
        self.model = model
        self.variant = model.variant
        self.height = height
        self.width = width
        self.gop_size = gop_size
        self.ga = ga
        self.pad_mode = pad_mode
        self.padded = padded_size(height, width, model.config.f_latent)
        self.latent_hw = model.iframe.latent_hw(*self.padded)

    def pad_frame(self, frame: np.ndarray) -> Tensor:
        return Tensor(pad_array(frame, *self.padded, mode=self.pad_mode).astype(get_dtype()))

    def pad_mask(self, mask: Optional[RoiMask]) -> Optional[Tensor]:
        if mask is None:
            return None
        values = pad_array(mask.values, *self.padded, mode=self.pad_mode)
        return Tensor(values[None, None].astype(get_dtype()))

    def crop(self, x: Tensor) -> np.ndarray:
        return x.data[:, :, : self.height, : self.width].copy()

    def gain_target(self, ftype: FrameType) -> str:
        return "iframe" if ftype is FrameType.IFRAME else "residual"

    def scaled(self, gain: AEOutput) -> Tensor:
        return apply_gain_amplifier(gain.decoded, self.ga)

    def check(self, x: Tensor, index: int) -> None:
        check_finite(x, f"reconstruction of frame {index}")

    def encode_frame(self, index: int, x: Tensor, mask: Optional[Tensor], prev: Optional[Tensor]) -> FrameResult:
        ftype = frame_type(index, self.gop_size)
        result = FrameResult(index, ftype, x)
        h = None
        if self.variant.uses_gain:
            result.outputs["gain"] = self.model.gain_forward(mask, self.gain_target(ftype))
            h = self.scaled(result.outputs["gain"])
        if ftype is FrameType.IFRAME:
            out = self.model.iframe_forward(x, mask, h)
            result.outputs["iframe"] = out
            result.reconstruction = out.decoded
        else:
            flow = self.model.pframe_flow_forward(prev, x, mask)
            prediction = self.model.predict(prev, flow.decoded)
            residual = self.model.pframe_residual_forward(x - prediction, mask, h)
            result.outputs["flow"] = flow
            result.outputs["residual"] = residual
            result.reconstruction = prediction + residual.decoded
        self.check(result.reconstruction, index)
        return result

    def decode_frame(self, index: int, coded: CodedFrame, mask: Optional[Tensor], prev: Optional[Tensor]) -> FrameResult:
        ftype = frame_type(index, self.gop_size)
        chunks = coded.chunks
        result = FrameResult(index, ftype, prev)
        h = None
        if self.variant.uses_gain:
            gain_ae = self.model.gain_ae(self.gain_target(ftype))
            gain = gain_ae.decode_chunks(chunks[ChunkKind.GAIN_HYPER], chunks[ChunkKind.GAIN_LATENT], self.latent_hw)
            expected = self.model.gain_forward(mask, self.gain_target(ftype))
            if not (
                np.array_equal(expected.latent_q.symbols, gain.latent_q.symbols)
                and np.array_equal(expected.hyper_q.symbols, gain.hyper_q.symbols)
            ):
                raise BitstreamError(f"Frame {index}: supplied mask does not reproduce the coded gain latent")
            result.outputs["gain"] = gain
            h = self.scaled(gain)
        if ftype is FrameType.IFRAME:
            out = self.model.iframe.decode_chunks(chunks[ChunkKind.IFRAME_HYPER], chunks[ChunkKind.IFRAME_LATENT], self.latent_hw, h)
            result.outputs["iframe"] = out
            result.reconstruction = out.decoded
        else:
            flow = self.model.flow.decode_chunks(chunks[ChunkKind.FLOW_HYPER], chunks[ChunkKind.FLOW_LATENT], self.latent_hw)
            prediction = self.model.predict(prev, flow.decoded)
            residual = self.model.residual.decode_chunks(
                chunks[ChunkKind.RESIDUAL_HYPER], chunks[ChunkKind.RESIDUAL_LATENT], self.latent_hw, h
            )
            result.outputs["flow"] = flow
            result.outputs["residual"] = residual
            result.reconstruction = prediction + residual.decoded
        self.check(result.reconstruction, index)
        return result

    def autoencoder(self, name: str, ftype: FrameType) -> HyperpriorAE:
        if name == "gain":
            return self.model.gain_ae(self.gain_target(ftype))
        return getattr(self.model, name)


def _check_variant(model: VideoCodecModel, variant) -> None:
    if variant is not None and Variant(variant) is not model.variant:
        raise ConfigError(f"Model is '{model.variant.value}', asked to code as '{Variant(variant).value}'")


def _frame_report(coder: _ClipCoder, result: FrameResult, coded: CodedFrame) -> FrameRateReport:
    bits = {"main": 0.0, "hyper": 0.0, "gain": 0.0}
    for name, out in result.outputs.items():
        main, hyper = coder.autoencoder(name, result.frame_type).rate(out)
        if name == "gain":
            bits["gain"] += main.item() + hyper.item()
        else:
            bits["main"] += main.item()
            bits["hyper"] += hyper.item()
    return FrameRateReport(
        frame=result.index,
        frame_type=result.frame_type.value,
        bits_main=bits["main"],
        bits_hyper=bits["hyper"],
        bits_gain=bits["gain"],
        bits_total=bits["main"] + bits["hyper"] + bits["gain"],
        bytes_coded=coded.num_bits // 8,
    )


def encode_clip(
    clip: VideoClip,
    model: VideoCodecModel,
    variant=None,
    ga: Optional[float] = None,
    config: Optional[CodecConfig] = None,
) -> EncodeResult:
    config = config or CodecConfig(gop_size=model.config.gop_size)
    _check_variant(model, variant)
    ga = config.ga if ga is None else ga
    if ga != 1 and not model.variant.uses_gain:
        raise ConfigError(f"Gain amplifier only applies to latent_scaling, variant is '{model.variant.value}'")
    if model.variant.uses_mask and clip.masks is None:
        raise ConfigError(f"Variant '{model.variant.value}' needs ROI masks")
    # the header stores ga as f32; both sides must scale with the same value
    ga = float(np.float32(ga))
    if ga < 0:
        raise ParameterError(f"Gain amplifier must be >= 0, got {ga}")
    if config.gop_size < 1:
        raise ConfigError(f"gop_size must be >= 1, got {config.gop_size}")

    coder = _ClipCoder(model, clip.height, clip.width, config.gop_size, ga, config.pad_mode)
    header = BitstreamHeader(
        variant=model.variant,
        height=clip.height,
        width=clip.width,
        frames=len(clip),
        gop_size=config.gop_size,
        ga=ga,
        model_hash=model_digest(model),
        mask_digest=mask_digest(clip.masks) if model.variant.uses_gain else NO_DIGEST,
    )
    bitstream = Bitstream(header)
    reports = []
    reconstructions = []
    prev = None
    with no_grad():
        for i, frame in enumerate(clip.frames):
            check_finite(frame, f"input frame {i}")
            mask = coder.pad_mask(clip.masks[i]) if model.variant.uses_mask else None
            result = coder.encode_frame(i, coder.pad_frame(frame), mask, prev)
            coded = CodedFrame(result.frame_type)
            for name, out in result.outputs.items():
                hyper_chunk, latent_chunk = coder.autoencoder(name, result.frame_type).encode_chunks(out)
                prefix = name.upper()
                coded.chunks[ChunkKind[f"{prefix}_HYPER"]] = hyper_chunk
                coded.chunks[ChunkKind[f"{prefix}_LATENT"]] = latent_chunk
            bitstream.frames.append(coded)
            reports.append(_frame_report(coder, result, coded))
            reconstructions.append(coder.crop(result.reconstruction))
            prev = result.reconstruction
            logger.debug(f"Frame {i} ({result.frame_type.value}): {coded.num_bits} bits in {len(coded.chunks)} chunks")
    logger.info(
        f"Encoded {len(clip)} frames {clip.width}x{clip.height} as {model.variant.value}: {bitstream.num_bits} bits"
    )
    return EncodeResult(bitstream, reports, reconstructions)


def _decode_frames(
    bitstream: Bitstream, model: VideoCodecModel, masks: Optional[Sequence] = None, pad_mode: str = "reflect"
) -> Iterator[tuple[_ClipCoder, FrameResult]]:
    header = bitstream.header
    if header.model_hash != model_digest(model):
        raise BitstreamError("Model hash in the bitstream does not match the supplied model")
    if header.variant is not model.variant:
        raise BitstreamError(f"Bitstream variant '{header.variant.value}' does not match model '{model.variant.value}'")
    if model.variant.uses_gain:
        if masks is None:
            raise ConfigError("latent_scaling bitstreams decode only with the encoder's ROI masks")
        masks = [m if isinstance(m, RoiMask) else RoiMask(m, i) for i, m in enumerate(masks)]
        if len(masks) != header.frames:
            raise DimensionError(f"{len(masks)} masks for {header.frames} coded frames")
        if mask_digest(masks) != header.mask_digest:
            raise BitstreamError("Supplied masks do not match the mask digest in the bitstream")
    if len(bitstream.frames) != header.frames:
        raise BitstreamError(f"Header declares {header.frames} frames, stream holds {len(bitstream.frames)}")

    coder = _ClipCoder(model, header.height, header.width, header.gop_size, header.ga, pad_mode)
    prev = None
    with no_grad():
        for i, coded in enumerate(bitstream.frames):
            mask = coder.pad_mask(masks[i]) if model.variant.uses_gain else None
            result = coder.decode_frame(i, coded, mask, prev)
            prev = result.reconstruction
            yield coder, result


def decode_clip(
    bitstream: Bitstream, model: VideoCodecModel, masks: Optional[Sequence] = None, pad_mode: str = "reflect"
) -> list[np.ndarray]:
    """Reconstructions (1x3xHxW, unpadded) of every coded frame."""
    reconstructions = [coder.crop(result.reconstruction) for coder, result in _decode_frames(bitstream, model, masks, pad_mode)]
    logger.info(f"Decoded {len(reconstructions)} frames")
    return reconstructions


@dataclass
class AllocationMap:
    frame_index: int
    # bits per pixel of the frame's main latents, one value per latent cell
    bpp: np.ndarray
    psnr: Optional[np.ndarray] = None
    cell_size: int = 16

    @property
    def main_bits(self) -> float:
        return float(self.bpp.sum() * self.cell_size**2)


def pixel_psnr(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """PSNR of every pixel over the three colour channels, capped at PSNR_CAP."""
    mse = np.mean((np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) ** 2, axis=(0, 1))
    with np.errstate(divide="ignore"):
        psnr = -10.0 * np.log10(mse)
    return np.minimum(psnr, PSNR_CAP)


def bit_allocation_map(
    bitstream: Bitstream,
    model: VideoCodecModel,
    frame_index: int,
    masks: Optional[Sequence] = None,
    original: Optional[np.ndarray] = None,
) -> AllocationMap:
    """Main-latent bits per pixel at latent resolution and, given the original frame, the per-pixel PSNR."""
    if not 0 <= frame_index < bitstream.header.frames:
        raise ParameterError(f"Frame index {frame_index} outside [0, {bitstream.header.frames})")
    for coder, result in _decode_frames(bitstream, model, masks):
        if result.index < frame_index:
            continue
        f = model.config.f_latent
        cells = np.zeros(coder.latent_hw)
        for name, out in result.outputs.items():
            if name == "gain":
                continue
            bits = coder.autoencoder(name, result.frame_type).prior(out).symbol_bits(out.latent_q.symbols)
            cells += bits.sum(axis=(0, 1))
        psnr = None
        if original is not None:
            psnr = pixel_psnr(original, coder.crop(result.reconstruction))
        return AllocationMap(frame_index, cells / f**2, psnr, f)
    raise BitstreamError(f"Frame {frame_index} not found in bitstream")


def write_reports(reports: Sequence[FrameRateReport], path) -> None:
    pd.DataFrame(list(reports)).to_csv(Path(path), index=False)
