"""
Rate-distortion evaluation: masked PSNR, bits per pixel, BD-rate and multirate sweeps.

PSNR is computed per frame in RGB over the pixels of one region, averaged over the
frames of a video, then over the videos of a dataset. A frame whose region is empty
does not take part in that region's average. Exact reconstructions report PSNR_CAP.
"""

import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy import integrate, interpolate

from roicodec.base.exceptions import ContractError, FormatError, OverlapError, ParameterError, UndefinedRegionError
from roicodec.base.types import FrameRateReport, FrameType
from roicodec.operators.codec.api import (
    PSNR_CAP,
    AllocationMap,
    VideoClip,
    decode_clip,
    encode_clip,
    pad_array,
    padded_size,
)
from roicodec.operators.codec.bitstream import frame_type
from roicodec.operators.codec.config import CodecConfig
from roicodec.operators.entropy.api import estimated_rate
from roicodec.operators.entropy.config import EntropyConfig
from roicodec.operators.evaluation.config import QUALITY_FIELDS, EvalConfig
from roicodec.operators.networks.api import VideoCodecModel, config_path, load_model
from roicodec.operators.networks.config import ModelConfig
from roicodec.operators.quantizer.api import apply_gain_amplifier
from roicodec.operators.tensor_core.api import Tensor, no_grad

logger = logging.getLogger(__name__)

REGIONS = ("roi", "nonroi")
SWEEP_COLUMNS = ["checkpoint", "variant", "beta", "gamma", "ga", "bpp", "roi_psnr", "nonroi_psnr"]
MIN_BD_POINTS = 4


def _region(mask: Optional[np.ndarray], shape: tuple[int, int], region: str) -> np.ndarray:
    if region not in REGIONS:
        raise ParameterError(f"Region must be one of {REGIONS}, got '{region}'")
    if mask is None:
        selected = np.ones(shape, dtype=bool)
    else:
        selected = np.asarray(getattr(mask, "values", mask)).reshape(shape) > 0
    return selected if region == "roi" else ~selected


def frame_mse(x: np.ndarray, x_hat: np.ndarray, mask=None, region: str = "roi") -> Optional[float]:
    """MSE over all channels of the region's pixels; None when the region is empty."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ContractError(f"Frame {x.shape} and reconstruction {x_hat.shape} differ in shape")
    selected = _region(mask, x.shape[-2:], region)
    if not selected.any():
        return None
    error = (x - x_hat) ** 2
    return float(error[..., selected].mean())


def mse_to_psnr(mse: float, cap: float = PSNR_CAP) -> float:
    if mse <= 0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


def masked_psnr(
    frames: Sequence[np.ndarray],
    reconstructions: Sequence[np.ndarray],
    masks: Optional[Sequence] = None,
    region: str = "roi",
    cap: float = PSNR_CAP,
) -> float:
    """PSNR of one video: per-frame PSNR over the region, averaged over the frames where it is non-empty.

    Without masks every pixel is ROI.
    """
    if len(frames) != len(reconstructions):
        raise ContractError(f"{len(frames)} frames but {len(reconstructions)} reconstructions")
    if masks is not None and len(masks) != len(frames):
        raise ContractError(f"{len(frames)} frames but {len(masks)} masks")
    values = []
    for i, (x, x_hat) in enumerate(zip(frames, reconstructions)):
        mse = frame_mse(x, x_hat, masks[i] if masks is not None else None, region)
        if mse is not None:
            values.append(mse_to_psnr(mse, cap))
    if not values:
        raise UndefinedRegionError(f"Region '{region}' is empty in all {len(frames)} frames")
    return float(np.mean(values))


def dataset_psnr(videos: Iterable[tuple], region: str = "roi", cap: float = PSNR_CAP) -> float:
    """Mean of the per-video PSNRs of (frames, reconstructions, masks) triples; videos without the region are skipped."""
    values = []
    for frames, reconstructions, masks in videos:
        try:
            values.append(masked_psnr(frames, reconstructions, masks, region, cap))
        except UndefinedRegionError:
            continue
    if not values:
        raise UndefinedRegionError(f"Region '{region}' is empty in every video")
    return float(np.mean(values))


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    roi_psnr: float
    nonroi_psnr: float
    label: str = ""
    variant: str = ""
    beta: Optional[float] = None
    ga: float = 1.0

    def __post_init__(self):
        if not self.bpp > 0:
            raise ParameterError(f"bpp must be > 0, got {self.bpp}")

    def quality(self, name: str) -> float:
        if name not in QUALITY_FIELDS:
            raise ParameterError(f"Quality field must be one of {QUALITY_FIELDS}, got '{name}'")
        return getattr(self, name)


@dataclass
class RdCurve:
    name: str
    points: list[RdPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        rates = self.rates()
        if len(rates) > 1 and not (np.diff(rates) > 0).all():
            raise ContractError(f"Curve '{self.name}' has repeated bpp values: {rates.tolist()}")

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    def qualities(self, name: str = "roi_psnr") -> np.ndarray:
        return np.array([p.quality(name) for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)


def _log_rate_integral(quality: np.ndarray, log_rate: np.ndarray, lo: float, hi: float) -> float:
    """Integral of the fitted log10(rate)(quality) over [lo, hi].

    The cubic fit is used when it increases over the interval; otherwise a monotone PCHIP
    interpolation of the points is integrated with the trapezoid rule.
    """
    poly = np.polyfit(quality, log_rate, 3)
    samples = np.linspace(lo, hi, num=101)
    if (np.polyval(np.polyder(poly), samples) >= 0).all():
        antiderivative = np.polyint(poly)
        return float(np.polyval(antiderivative, hi) - np.polyval(antiderivative, lo))
    logger.debug("Cubic rate fit is not monotone over the common interval, using PCHIP")
    order = np.argsort(quality)
    if not (np.diff(quality[order]) > 0).all():
        raise ContractError("Quality values of a curve must be distinct")
    values = interpolate.pchip_interpolate(quality[order], log_rate[order], samples)
    return float(integrate.trapezoid(values, samples))


def bd_rate(reference: RdCurve, test: RdCurve, quality: str = "roi_psnr") -> float:
    """Average bitrate difference of `test` against `reference` at equal quality, in percent.

    Negative values mean the test curve needs fewer bits.
    """
    for curve in (reference, test):
        if len(curve) < MIN_BD_POINTS:
            raise ParameterError(f"Curve '{curve.name}' has {len(curve)} points, BD-rate needs {MIN_BD_POINTS}")
    q_ref, q_test = reference.qualities(quality), test.qualities(quality)
    lo = max(q_ref.min(), q_test.min())
    hi = min(q_ref.max(), q_test.max())
    if lo >= hi:
        raise OverlapError(
            f"Curves '{reference.name}' and '{test.name}' share no {quality} interval "
            f"([{q_ref.min():.3f}, {q_ref.max():.3f}] vs [{q_test.min():.3f}, {q_test.max():.3f}])"
        )
    int_ref = _log_rate_integral(q_ref, np.log10(reference.rates()), lo, hi)
    int_test = _log_rate_integral(q_test, np.log10(test.rates()), lo, hi)
    avg_diff = (int_test - int_ref) / (hi - lo)
    return float((10.0**avg_diff - 1.0) * 100.0)


@dataclass
class ClipEvaluation:
    bits: float
    pixels: int
    reports: list[FrameRateReport]
    reconstructions: list[np.ndarray]


def evaluate_clip(model: VideoCodecModel, clip: VideoClip, ga: float = 1.0, gop_size: Optional[int] = None) -> ClipEvaluation:
    config = CodecConfig(gop_size=gop_size or model.config.gop_size)
    ga = ga if model.variant.uses_gain else None
    result = encode_clip(clip, model, ga=ga, config=config)
    # coded payload length; the per-frame reports keep the model estimate
    bits = float(result.bitstream.num_bits)
    return ClipEvaluation(bits, len(clip) * clip.height * clip.width, result.reports, result.reconstructions)


def evaluate_model(
    model: VideoCodecModel,
    clips: Sequence[VideoClip],
    ga: float = 1.0,
    config: Optional[EvalConfig] = None,
    label: str = "",
    reports: Optional[list] = None,
) -> RdPoint:
    """One R-D point: bpp over every pixel of the dataset and the frame/video-averaged region PSNRs.

    The per-frame rate reports of every clip are appended to `reports` when given.
    """
    config = config or EvalConfig()
    if not clips:
        raise ParameterError("Evaluation needs at least one clip")
    bits, pixels, videos = 0.0, 0, []
    for clip in clips:
        evaluation = evaluate_clip(model, clip, ga, config.gop_size)
        bits += evaluation.bits
        pixels += evaluation.pixels
        if reports is not None:
            reports.extend(evaluation.reports)
        videos.append((clip.frames, evaluation.reconstructions, clip.masks))
    point = RdPoint(
        bpp=bits / pixels,
        roi_psnr=dataset_psnr(videos, "roi", config.psnr_cap),
        nonroi_psnr=_nonroi_psnr(videos, config.psnr_cap),
        label=label,
        variant=model.variant.value,
        beta=model.config.beta,
        ga=float(ga),
    )
    logger.info(
        f"{label or model.variant.value} ga={ga}: {point.bpp:.4f} bpp, "
        f"roi {point.roi_psnr:.2f} dB, non-roi {point.nonroi_psnr:.2f} dB"
    )
    return point


def _nonroi_psnr(videos: list[tuple], cap: float) -> float:
    # clips without masks have no non-ROI pixels
    try:
        return dataset_psnr(videos, "nonroi", cap)
    except UndefinedRegionError:
        return float("nan")


@dataclass
class SweepResult:
    table: pd.DataFrame
    curves: dict[str, RdCurve]


def _sweep_tasks(configs: dict[Path, ModelConfig], ga_values: Sequence[float]) -> list[tuple[Path, float]]:
    tasks = []
    for path, model_config in configs.items():
        # only latent_scaling models read ga, the others contribute a single point
        for ga in ga_values if model_config.model_variant.uses_gain else (1.0,):
            tasks.append((path, float(ga)))
    return tasks


def _checkpoint_config(path: Path) -> ModelConfig:
    if not path.exists():
        raise FormatError(f"Checkpoint {path} not found")
    sidecar = config_path(path)
    if not sidecar.exists():
        raise FormatError(f"Model config {sidecar} not found next to {path}")
    return ModelConfig.from_file(sidecar)


def _curves(points: list[tuple[Path, RdPoint]]) -> dict[str, RdCurve]:
    """Points of a checkpoint swept over several ga form one curve; single-point checkpoints group by variant."""
    per_checkpoint: dict[Path, list[RdPoint]] = {}
    for path, point in points:
        per_checkpoint.setdefault(path, []).append(point)
    grouped: dict[str, list[RdPoint]] = {}
    for path, checkpoint_points in per_checkpoint.items():
        if len(checkpoint_points) > 1:
            grouped[f"{checkpoint_points[0].variant}-{path.stem}"] = checkpoint_points
        else:
            grouped.setdefault(checkpoint_points[0].variant, []).extend(checkpoint_points)
    curves = {}
    for name, curve_points in grouped.items():
        try:
            curves[name] = RdCurve(name, curve_points)
        except ContractError as e:
            logger.warning(f"Skipping curve: {e}")
    return curves


async def sweep(
    model_paths: Sequence,
    clips: Sequence[VideoClip],
    config: Optional[EvalConfig] = None,
    out_dir=None,
) -> SweepResult:
    """One R-D point per (checkpoint, ga), evaluated on worker threads.

    With `out_dir`, writes sweep.csv, one two-column plot-data file per curve and
    region, and rd_curves.png.
    """
    config = (config or EvalConfig()).validate()
    configs = {Path(p): _checkpoint_config(Path(p)) for p in model_paths}
    tasks = _sweep_tasks(configs, config.ga_values)
    semaphore = asyncio.Semaphore(config.threads)
    logger.info(f"Sweeping {len(configs)} checkpoints, {len(tasks)} points")

    def evaluate(path: Path, ga: float) -> RdPoint:
        return evaluate_model(load_model(path), clips, ga, config, label=path.stem)

    async def run_task(index: int, path: Path, ga: float) -> RdPoint:
        async with semaphore:
            logger.info(f"({index + 1}/{len(tasks)}) {path.name} ga={ga}")
            return await asyncio.to_thread(evaluate, path, ga)

    points = await asyncio.gather(*(run_task(i, path, ga) for i, (path, ga) in enumerate(tasks)))
    table = pd.DataFrame(
        [
            {
                "checkpoint": str(path),
                "variant": point.variant,
                "beta": point.beta,
                "gamma": configs[path].gamma,
                "ga": point.ga,
                "bpp": point.bpp,
                "roi_psnr": point.roi_psnr,
                "nonroi_psnr": point.nonroi_psnr,
            }
            for (path, _), point in zip(tasks, points)
        ],
        columns=SWEEP_COLUMNS,
    )
    curves = _curves([(path, point) for (path, _), point in zip(tasks, points)])
    if out_dir is not None:
        write_sweep(table, curves, out_dir, plots=config.plots)
    return SweepResult(table, curves)


def write_plot_data(curve: RdCurve, path, quality: str = "roi_psnr") -> None:
    """Two whitespace-separated columns (bpp, PSNR) with a comment header, readable by gnuplot."""
    data = np.column_stack([curve.rates(), curve.qualities(quality)])
    np.savetxt(path, data, fmt="%.6f", header=f"{curve.name} bpp {quality}")


def write_sweep(table: pd.DataFrame, curves: dict[str, RdCurve], out_dir, plots: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "sweep.csv", index=False)
    for name, curve in curves.items():
        for region in REGIONS:
            write_plot_data(curve, out_dir / f"{name}_{region}.dat", f"{region}_psnr")
    if plots:
        plot_rd_curves(curves, out_dir / "rd_curves.png")
    logger.info(f"Wrote sweep results for {len(table)} points to {out_dir}")


def amplified_rates(sigma, h, ga_values: Sequence[float], config: Optional[EntropyConfig] = None) -> list[float]:
    """Estimated bits of a latent with prior scales `sigma` and bin widths `h` amplified by each ga."""
    sigma = np.ravel(np.asarray(sigma, dtype=np.float64))
    h = Tensor(np.broadcast_to(np.asarray(h, dtype=np.float64).ravel(), sigma.shape).reshape(1, 1, 1, -1))
    return [estimated_rate(sigma, apply_gain_amplifier(h, ga).data.ravel(), config) for ga in ga_values]


def gain_overhead(reports: Sequence[FrameRateReport]) -> float:
    """Fraction of all bits spent on the gain latents and hyper-latents."""
    if not reports:
        raise ParameterError("gain_overhead needs at least one frame report")
    total = sum(r["bits_total"] for r in reports)
    if total <= 0:
        raise ParameterError("Reports contain no bits")
    return sum(r["bits_gain"] for r in reports) / total


def _network_seconds(model: VideoCodecModel, clip: VideoClip, gop_size: int) -> dict[FrameType, list[float]]:
    """Per-frame wall time of the analysis/synthesis transforms alone, fed with the original frames."""
    height, width = padded_size(clip.height, clip.width, model.config.f_latent)
    seconds: dict[FrameType, list[float]] = {FrameType.IFRAME: [], FrameType.PFRAME: []}
    prev = None
    for i, frame in enumerate(clip.frames):
        x = Tensor(pad_array(frame, height, width))
        mask = None
        if model.variant.uses_mask:
            mask = Tensor(pad_array(clip.masks[i].values, height, width)[None, None])
        ftype = frame_type(i, gop_size)
        start = time.perf_counter()
        h = None
        if model.variant.uses_gain:
            h = model.gain_forward(mask, "iframe" if ftype is FrameType.IFRAME else "residual").decoded
        if ftype is FrameType.IFRAME:
            model.iframe_forward(x, mask, h)
        else:
            flow = model.pframe_flow_forward(prev, x, mask)
            prediction = model.predict(prev, flow.decoded)
            model.pframe_residual_forward(x - prediction, mask, h)
        seconds[ftype].append(time.perf_counter() - start)
        prev = x
    return seconds


def _fps(seconds: list[float]) -> float:
    return len(seconds) / sum(seconds) if seconds and sum(seconds) > 0 else float("nan")


def timing_report(model: VideoCodecModel, clip: VideoClip, ga: float = 1.0, gop_size: Optional[int] = None) -> dict:
    """Frames per second of encoding and decoding with entropy coding, and of the networks alone per frame type."""
    gop_size = gop_size or model.config.gop_size
    config = CodecConfig(gop_size=gop_size)
    start = time.perf_counter()
    result = encode_clip(clip, model, ga=ga if model.variant.uses_gain else None, config=config)
    encode_seconds = time.perf_counter() - start
    start = time.perf_counter()
    decode_clip(result.bitstream, model, clip.masks)
    decode_seconds = time.perf_counter() - start
    with no_grad():
        network = _network_seconds(model, clip, gop_size)
    report = {
        "frames": len(clip),
        "encode_seconds": encode_seconds,
        "decode_seconds": decode_seconds,
        "encode_fps": len(clip) / encode_seconds,
        "decode_fps": len(clip) / decode_seconds,
        "network_fps_iframe": _fps(network[FrameType.IFRAME]),
        "network_fps_pframe": _fps(network[FrameType.PFRAME]),
    }
    logger.info(f"Timing: encode {report['encode_fps']:.2f} fps, decode {report['decode_fps']:.2f} fps")
    return report


def plot_rd_curves(curves: dict[str, RdCurve], path) -> None:
    """bpp against PSNR; ROI solid, non-ROI dashed, one colour per curve."""
    fig, ax = plt.subplots(figsize=(8, 6))
    for i, (name, curve) in enumerate(curves.items()):
        color = f"C{i % 10}"
        ax.plot(curve.rates(), curve.qualities("roi_psnr"), "-o", color=color, label=f"{name} ROI")
        ax.plot(curve.rates(), curve.qualities("nonroi_psnr"), "--s", color=color, label=f"{name} non-ROI")
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR [dB]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def plot_allocation_maps(allocation: AllocationMap, path, frame: Optional[np.ndarray] = None, mask=None) -> None:
    """Panels of the frame (with the ROI outline), the bits-per-pixel map and the per-pixel PSNR map."""
    panels = [p for p in ("frame", "bpp", "psnr") if p != "frame" or frame is not None]
    if allocation.psnr is None:
        panels.remove("psnr")
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4), squeeze=False)
    for ax, panel in zip(axes[0], panels):
        if panel == "frame":
            ax.imshow(np.clip(np.transpose(frame[0], (1, 2, 0)), 0, 1))
            if mask is not None:
                ax.contour(np.asarray(getattr(mask, "values", mask)), levels=[0.5], colors="yellow", linewidths=1)
            ax.set_title(f"Frame {allocation.frame_index}")
        elif panel == "bpp":
            image = ax.imshow(allocation.bpp, cmap="viridis", interpolation="nearest")
            fig.colorbar(image, ax=ax, label="bpp")
            ax.set_title(f"Bit allocation ({allocation.main_bits:.0f} bits)")
        else:
            image = ax.imshow(allocation.psnr, cmap="magma")
            fig.colorbar(image, ax=ax, label="dB")
            ax.set_title("PSNR")
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
