"""
Command-line entry point: train, encode, decode, eval, maskgen and sweep.

Results go to the paths named by the flags; diagnostics go to stderr. Exit codes:
0 success, 1 usage or configuration error, 2 data or format error, 3 numeric failure.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from roicodec.base.exceptions import FormatError, OverlapError, ParameterError, RoiCodecError, UndefinedRegionError, UsageError
from roicodec.common.netpbm import read_label_map, read_mask_dir, sorted_files, write_frame_dir, write_mask_dir
from roicodec.common.utils import dump_json, setup_logging
from roicodec.operators.codec.api import VideoClip, bit_allocation_map, decode_clip, encode_clip, write_reports
from roicodec.operators.codec.bitstream import Bitstream
from roicodec.operators.codec.config import CodecConfig
from roicodec.operators.evaluation.api import (
    RdCurve,
    RdPoint,
    bd_rate,
    evaluate_model,
    gain_overhead,
    plot_allocation_maps,
    sweep,
    timing_report,
)
from roicodec.operators.evaluation.config import EvalConfig
from roicodec.operators.networks.api import load_model
from roicodec.operators.networks.config import ModelConfig
from roicodec.operators.roi_masks.api import mask_from_class_names, mask_from_instances, perlin_masks
from roicodec.operators.roi_masks.config import PerlinConfig
from roicodec.operators.trainer.api import train
from roicodec.operators.trainer.config import TrainConfig
from roicodec.operators.trainer.data import FrameDirectoryDataset, SyntheticShapesDataset

logger = logging.getLogger(__name__)

VARIANTS = ("ssf", "implicit", "latent_scaling")
BD_COLUMNS = ["curve", "reference", "bd_rate_roi", "bd_rate_nonroi"]


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(cls, args, **overrides):
    """Defaults < --config file < flags."""
    overrides.setdefault("seed", args.seed)
    if args.config is not None:
        return cls.from_file(args.config, **overrides)
    return cls(**overrides)


def echo_config(config, output) -> Path:
    path = Path(str(output) + ".config.json")
    config.echo(path)
    return path


def _require(path: Optional[Path], what: str, directory: bool = False) -> None:
    if path is None:
        return
    if directory and not path.is_dir():
        raise FormatError(f"{what} {path} is not a directory")
    if not directory and not path.is_file():
        raise FormatError(f"{what} {path} not found")


def load_clips(args) -> list[VideoClip]:
    """Clips from --frames/--masks, or every <clip>/frames (+ <clip>/masks) under --data."""
    if args.data is not None:
        _require(args.data, "Data directory", directory=True)
        clip_dirs = sorted(p for p in args.data.iterdir() if (p / "frames").is_dir())
        if not clip_dirs:
            raise FormatError(f"No <clip>/frames directories under {args.data}")
        return [
            VideoClip.from_directories(d / "frames", d / "masks" if (d / "masks").is_dir() else None) for d in clip_dirs
        ]
    if args.frames is None:
        raise UsageError("Give --frames (with optional --masks) or --data")
    _require(args.frames, "Frame directory", directory=True)
    _require(args.masks, "Mask directory", directory=True)
    return [VideoClip.from_directories(args.frames, args.masks)]


def cmd_train(args) -> None:
    config = _config(
        TrainConfig,
        args,
        variant=args.variant,
        beta=args.beta,
        gamma=args.gamma,
        steps=args.steps,
        batch=args.batch,
        frames_per_example=args.frames_per_example,
        mask_source=args.mask_source,
        threads=args.threads,
    ).validate()
    _require(args.model_config, "Model config")
    _require(args.init, "Initial model")
    _require(args.data, "Data directory", directory=True)
    model_config = ModelConfig.from_file(args.model_config) if args.model_config is not None else None
    model = load_model(args.init) if args.init is not None else None
    if args.data is not None:
        dataset = FrameDirectoryDataset(args.data, config.frames_per_example, (config.crop_height, config.crop_width))
    else:
        dataset = SyntheticShapesDataset(config.crop_height, config.crop_width, config.frames_per_example, config.mask_source)
    args.out.mkdir(parents=True, exist_ok=True)
    echo_config(config, args.out / "model.rnvc")
    result = train(dataset, config, model_config, args.out, model)
    if not result.history.empty:
        logger.info(f"Final loss {result.history.iloc[-1]['loss']:.5f}")
    logger.info(f"Model written to {args.out / 'model.rnvc'}")


def _codec_config(args, model) -> CodecConfig:
    """Defaults < the model's GoP size < --config file < flags."""
    config = CodecConfig(gop_size=model.config.gop_size, seed=args.seed)
    if args.config is not None:
        config.update(**CodecConfig.parse_text(args.config.read_text()))
    return config.update(gop_size=args.gop, ga=args.ga)


def cmd_encode(args) -> None:
    _require(args.model, "Model")
    model = load_model(args.model)
    config = _codec_config(args, model)
    clip = load_clips(args)[0]
    result = encode_clip(clip, model, args.variant, config=config)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    size = result.bitstream.write(args.out)
    report_path = args.report or Path(str(args.out) + ".csv")
    write_reports(result.reports, report_path)
    echo_config(config, args.out)
    if args.recon_dir is not None:
        write_frame_dir(result.reconstructions, args.recon_dir)
    bpp = 8 * size / (len(clip) * clip.height * clip.width)
    logger.info(f"Wrote {size} bytes ({bpp:.4f} bpp) to {args.out}, rate report {report_path}")


def cmd_decode(args) -> None:
    _require(args.model, "Model")
    _require(args.bitstream, "Bitstream")
    _require(args.masks, "Mask directory", directory=True)
    model = load_model(args.model)
    config = _config(CodecConfig, args)
    masks = read_mask_dir(args.masks) if args.masks is not None else None
    bitstream = Bitstream.read(args.bitstream)
    reconstructions = decode_clip(bitstream, model, masks, config.pad_mode)
    write_frame_dir(reconstructions, args.out_dir)
    echo_config(config, args.out_dir)
    logger.info(f"Decoded {len(reconstructions)} frames into {args.out_dir}")


def cmd_eval(args) -> None:
    _require(args.model, "Model")
    config = _config(EvalConfig, args, threads=args.threads).validate()
    model = load_model(args.model)
    clips = load_clips(args)
    if args.allocation_frame is not None and not 0 <= args.allocation_frame < len(clips[0]):
        raise UsageError(f"--allocation-frame {args.allocation_frame} outside the {len(clips[0])} frames of the clip")
    ga = args.ga if args.ga is not None else 1.0
    reports = []
    point = evaluate_model(model, clips, ga, config, label=args.model.stem, reports=reports)
    row = {
        "checkpoint": str(args.model),
        "variant": point.variant,
        "beta": point.beta,
        "gamma": model.config.gamma,
        "ga": point.ga,
        "bpp": point.bpp,
        "roi_psnr": point.roi_psnr,
        "nonroi_psnr": point.nonroi_psnr,
    }
    if model.variant.uses_gain:
        row["gain_overhead"] = gain_overhead(reports)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row]).to_csv(args.out, index=False)
    echo_config(config, args.out)
    if args.allocation_frame is not None:
        clip = clips[0]
        codec_config = CodecConfig(gop_size=config.gop_size or model.config.gop_size)
        result = encode_clip(clip, model, ga=ga if model.variant.uses_gain else None, config=codec_config)
        index = args.allocation_frame
        allocation = bit_allocation_map(result.bitstream, model, index, clip.masks, clip.frames[index])
        mask = clip.masks[index] if clip.masks is not None else None
        plot_allocation_maps(allocation, Path(str(args.out) + f".frame{index}.png"), clip.frames[index], mask)
        np.save(Path(str(args.out) + f".frame{index}.bpp.npy"), allocation.bpp)
    if args.timing:
        dump_json(timing_report(model, clips[0], ga, config.gop_size), Path(str(args.out) + ".timing.json"))
    logger.info(f"Evaluation written to {args.out}")


def cmd_maskgen(args) -> None:
    if args.labels is not None:
        _require(args.labels, "Label directory", directory=True)
        files = sorted_files(args.labels, ".pgm")
        if not files:
            raise FormatError(f"No .pgm label maps in {args.labels}")
        if args.classes is not None:
            names = [name for name in args.classes.split(",") if name]
            masks = [mask_from_class_names(read_label_map(p), names, frame_index=i) for i, p in enumerate(files)]
        else:
            masks = [mask_from_instances(read_label_map(p), frame_index=i) for i, p in enumerate(files)]
        config = None
    else:
        if args.height is None or args.width is None or args.frames is None:
            raise UsageError("Perlin masks need --height, --width and --frames (or give --labels)")
        config = _config(PerlinConfig, args, threshold=args.threshold, velocity=args.velocity)
        masks = perlin_masks(args.height, args.width, args.frames, config.seed, config)
    write_mask_dir([m.values for m in masks], args.out)
    if config is not None:
        echo_config(config, args.out)
    coverage = np.mean([m.coverage for m in masks])
    logger.info(f"Wrote {len(masks)} masks to {args.out}, mean ROI coverage {coverage:.3f}")


def _reference_curve(path: Path) -> RdCurve:
    _require(path, "Reference table")
    table = pd.read_csv(path)
    missing = {"bpp", "roi_psnr", "nonroi_psnr"} - set(table.columns)
    if missing:
        raise FormatError(f"{path} lacks columns {sorted(missing)}")
    points = [RdPoint(row.bpp, row.roi_psnr, row.nonroi_psnr) for row in table.itertuples()]
    return RdCurve(path.stem, points)


def _bd_rate_or_nan(reference: RdCurve, test: RdCurve, quality: str) -> float:
    try:
        return bd_rate(reference, test, quality)
    except (OverlapError, ParameterError, UndefinedRegionError) as e:
        logger.warning(f"No BD-rate for '{test.name}' on {quality}: {e}")
        return float("nan")


def cmd_sweep(args) -> None:
    for path in args.models:
        _require(path, "Checkpoint")
    reference = _reference_curve(args.reference) if args.reference is not None else None
    config = _config(EvalConfig, args, ga_values=args.ga, threads=args.threads).validate()
    clips = load_clips(args)
    result = asyncio.run(sweep(args.models, clips, config, args.out))
    echo_config(config, args.out / "sweep.csv")
    if reference is not None:
        rows = [
            {
                "curve": name,
                "reference": reference.name,
                "bd_rate_roi": _bd_rate_or_nan(reference, curve, "roi_psnr"),
                "bd_rate_nonroi": _bd_rate_or_nan(reference, curve, "nonroi_psnr"),
            }
            for name, curve in result.curves.items()
        ]
        pd.DataFrame(rows, columns=BD_COLUMNS).to_csv(args.out / "bd_rate.csv", index=False)
    logger.info(f"Sweep of {len(result.table)} points written to {args.out}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file; flags override its values")
    common.add_argument("--seed", type=int, help="Seed for every stochastic choice")
    common.add_argument("--threads", type=int, help="Worker threads for data loading and evaluation (default 1)")
    common.add_argument(
        "--log-level",
        type=str.upper,
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Logging level for stderr (default WARNING)",
    )
    return common


def _clip_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--frames", type=Path, help="Directory of PPM frames")
    parser.add_argument("--masks", type=Path, help="Directory of PGM ROI masks, one per frame")
    parser.add_argument("--data", type=Path, help="Directory of clips laid out as <clip>/frames and <clip>/masks")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="roicodec",
        description="ROI-aware neural video compression",
        formatter_class=argparse.RawTextHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", title="Commands", metavar="<command>", parser_class=ArgumentParser)
    common = _common_options()

    # Sub-command 'train'
    p = subparsers.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--out", type=Path, required=True, help="Output directory for checkpoints, model and curves")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--beta", type=float, help="Rate weight")
    p.add_argument("--gamma", type=float, help="Non-ROI distortion divisor (>= 1)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--frames-per-example", type=int)
    p.add_argument("--mask-source", choices=("shapes", "perlin"), help="Masks of the synthetic clips")
    p.add_argument("--data", type=Path, help="Directory of <clip>/frames and <clip>/masks; synthetic clips otherwise")
    p.add_argument("--model-config", type=Path, help="ModelConfig key = value file")
    p.add_argument("--init", type=Path, help="Start from this model")
    p.set_defaults(handler=cmd_train)

    # Sub-command 'encode'
    p = subparsers.add_parser("encode", parents=[common], help="Encode a clip into a bitstream")
    p.add_argument("--model", type=Path, required=True)
    _clip_options(p)
    p.add_argument("--out", type=Path, required=True, help="Bitstream file")
    p.add_argument("--variant", choices=VARIANTS, help="Must match the model when given")
    p.add_argument("--ga", type=float, help="Gain amplifier (latent_scaling only)")
    p.add_argument("--gop", type=int, help="GoP size (default: the model's)")
    p.add_argument("--report", type=Path, help="Rate report CSV (default <out>.csv)")
    p.add_argument("--recon-dir", type=Path, help="Write encoder-side reconstructions here")
    p.set_defaults(handler=cmd_encode)

    # Sub-command 'decode'
    p = subparsers.add_parser("decode", parents=[common], help="Decode a bitstream into PPM frames")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--bitstream", type=Path, required=True)
    p.add_argument("--masks", type=Path, help="ROI masks used at encoding (latent_scaling)")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(handler=cmd_decode)

    # Sub-command 'eval'
    p = subparsers.add_parser("eval", parents=[common], help="Rate and ROI/non-ROI PSNR of one model")
    p.add_argument("--model", type=Path, required=True)
    _clip_options(p)
    p.add_argument("--ga", type=float, help="Gain amplifier (latent_scaling only)")
    p.add_argument("--out", type=Path, required=True, help="Result CSV")
    p.add_argument("--allocation-frame", type=int, help="Also write the bit allocation map of this frame of the first clip")
    p.add_argument("--timing", action="store_true", help="Also write encode/decode timings")
    p.set_defaults(handler=cmd_eval)

    # Sub-command 'maskgen'
    p = subparsers.add_parser("maskgen", parents=[common], help="Write ROI masks as PGM files")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--threshold", type=float, help="Perlin threshold")
    p.add_argument("--velocity", type=float, help="Perlin drift in pixels per frame")
    p.add_argument("--labels", type=Path, help="Directory of PGM label maps instead of Perlin noise")
    p.add_argument("--classes", help="Comma-separated class names; the label maps then hold class ids")
    p.set_defaults(handler=cmd_maskgen)

    # Sub-command 'sweep'
    p = subparsers.add_parser("sweep", parents=[common], help="R-D points of several checkpoints and gain amplifiers")
    p.add_argument("--models", type=Path, nargs="+", required=True)
    _clip_options(p)
    p.add_argument("--ga", help="Comma-separated gain amplifier values")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--reference", type=Path, help="CSV with bpp, roi_psnr and nonroi_psnr columns; adds bd_rate.csv")
    p.set_defaults(handler=cmd_sweep)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        setup_logging(args.log_level)
        if args.threads is not None and args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except RoiCodecError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
