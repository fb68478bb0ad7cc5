import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from helpers import randomize_zero_layers, tiny_config
from roicodec import cli
from roicodec.base.exceptions import NumericError
from roicodec.common.netpbm import sorted_files, write_frame_dir, write_mask_dir
from roicodec.operators.networks.api import VideoCodecModel, save_model


@pytest.fixture
def clip_dirs(tmp_path):
    ys, xs = np.mgrid[0:8, 0:12]
    frames, masks = [], []
    for t in range(3):
        base = 0.5 + 0.4 * np.sin((xs + t) / 3.0) * np.cos(ys / 4.0)
        frames.append(np.stack([base, 1 - base, 0.5 * base])[None])
        masks.append((xs + t) % 12 < 6)
    write_frame_dir(frames, tmp_path / "clip" / "frames")
    write_mask_dir(masks, tmp_path / "clip" / "masks")
    return tmp_path / "clip" / "frames", tmp_path / "clip" / "masks"


def model_file(tmp_path, variant, name="model"):
    model = randomize_zero_layers(VideoCodecModel(tiny_config(variant=variant, gop_size=2)), np.random.default_rng(4))
    path = tmp_path / f"{name}.rnvc"
    save_model(model, path)
    return path


def test_usage_errors_exit_with_one(capsys):
    assert cli.run([]) == 1
    assert cli.run(["compress"]) == 1
    assert cli.run(["encode", "--out", "x.rvbs"]) == 1
    assert cli.run(["maskgen", "--out", "m", "--log-level", "loud"]) == 1


def test_help_exits_cleanly(capsys):
    assert cli.run(["--help"]) == 0
    assert "maskgen" in capsys.readouterr().out


def test_maskgen_is_deterministic(tmp_path):
    args = ["maskgen", "--height", "16", "--width", "24", "--frames", "4"]
    assert cli.run(args + ["--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert cli.run(args + ["--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a, b = sorted_files(tmp_path / "a", ".pgm"), sorted_files(tmp_path / "b", ".pgm")
    assert len(a) == 4
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    echoed = json.loads((tmp_path / "a.config.json").read_text())
    assert echoed["seed"] == 7


def test_maskgen_from_label_maps(tmp_path):
    labels = tmp_path / "labels"
    labels.mkdir()
    label_map = np.zeros((4, 6), dtype=np.uint8)
    label_map[:, :2] = 26  # car
    label_map[:, 2:4] = 7  # road
    label_map[:, 4:] = 21  # vegetation
    Image.fromarray(label_map, "L").save(labels / "000.pgm", format="PPM")
    assert cli.run(["maskgen", "--labels", str(labels), "--classes", "vehicle,road", "--out", str(tmp_path / "m")]) == 0
    mask = np.asarray(Image.open(sorted_files(tmp_path / "m", ".pgm")[0]))
    assert (mask[:, :4] == 255).all() and (mask[:, 4:] == 0).all()
    assert cli.run(["maskgen", "--labels", str(labels), "--classes", "sky_scraper", "--out", str(tmp_path / "n")]) == 1


def test_encode_decode_reconstructions_match(tmp_path, clip_dirs):
    frames, masks = clip_dirs
    model = model_file(tmp_path, "latent_scaling")
    stream = tmp_path / "clip.rvbs"
    code = cli.run(
        ["encode", "--model", str(model), "--frames", str(frames), "--masks", str(masks), "--out", str(stream),
         "--variant", "latent_scaling", "--ga", "1", "--recon-dir", str(tmp_path / "enc")]
    )
    assert code == 0
    report = pd.read_csv(str(stream) + ".csv")
    assert report["frame_type"].tolist() == ["I", "P", "I"]
    assert json.loads((tmp_path / "clip.rvbs.config.json").read_text())["gop_size"] == 2
    code = cli.run(
        ["decode", "--model", str(model), "--bitstream", str(stream), "--masks", str(masks), "--out-dir", str(tmp_path / "dec")]
    )
    assert code == 0
    encoded = sorted_files(tmp_path / "enc", ".ppm")
    decoded = sorted_files(tmp_path / "dec", ".ppm")
    assert len(decoded) == 3
    assert [p.read_bytes() for p in encoded] == [p.read_bytes() for p in decoded]


def test_exit_codes_for_bad_data(tmp_path, clip_dirs):
    frames, masks = clip_dirs
    model = model_file(tmp_path, "ssf")
    missing = ["encode", "--model", str(tmp_path / "none.rnvc"), "--frames", str(frames), "--out", str(tmp_path / "x.rvbs")]
    assert cli.run(missing) == 2
    # gain amplifier on a model without gain units is a configuration error
    ga = ["encode", "--model", str(model), "--frames", str(frames), "--out", str(tmp_path / "y.rvbs"), "--ga", "2"]
    assert cli.run(ga) == 1
    stream = tmp_path / "z.rvbs"
    assert cli.run(["encode", "--model", str(model), "--frames", str(frames), "--out", str(stream)]) == 0
    data = bytearray(stream.read_bytes())
    data[len(data) // 2] ^= 0xFF
    stream.write_bytes(bytes(data))
    assert cli.run(["decode", "--model", str(model), "--bitstream", str(stream), "--out-dir", str(tmp_path / "d")]) == 2


def test_numeric_failures_exit_with_three(tmp_path, monkeypatch):
    def explode(args):
        raise NumericError("NaN in reconstruction of frame 0")

    monkeypatch.setattr(cli, "cmd_maskgen", explode)
    assert cli.run(["maskgen", "--out", str(tmp_path / "m")]) == 3


def test_train_writes_model_and_curves(tmp_path):
    config = tmp_path / "train.cfg"
    config.write_text("crop_height = 8\ncrop_width = 8\nbatch = 1\nframes_per_example = 2\nlog_every = 1\ncheckpoint_every = 1\n")
    model_config = tmp_path / "model.cfg"
    tiny_config().write(model_config)
    out = tmp_path / "run"
    args = ["train", "--out", str(out), "--variant", "implicit", "--steps", "2", "--seed", "3", "--config", str(config),
            "--model-config", str(model_config)]
    assert cli.run(args) == 0
    assert (out / "model.rnvc").exists() and (out / "model.rnvc.cfg").exists()
    assert pd.read_csv(out / "curves.csv")["step"].tolist() == [1, 2]
    echoed = json.loads((out / "model.rnvc.config.json").read_text())
    assert echoed["steps"] == 2 and echoed["crop_height"] == 8
    assert cli.run(["train", "--out", str(tmp_path / "bad"), "--gamma", "0.5"]) == 1


def test_eval_writes_point_and_allocation_map(tmp_path, clip_dirs):
    frames, masks = clip_dirs
    model = model_file(tmp_path, "latent_scaling")
    out = tmp_path / "eval.csv"
    args = ["eval", "--model", str(model), "--frames", str(frames), "--masks", str(masks), "--out", str(out),
            "--allocation-frame", "1", "--timing"]
    assert cli.run(args) == 0
    row = pd.read_csv(out).iloc[0]
    assert row["bpp"] > 0 and 0 < row["gain_overhead"] < 1
    assert (tmp_path / "eval.csv.frame1.png").exists()
    assert np.load(tmp_path / "eval.csv.frame1.bpp.npy").shape == (2, 3)
    assert json.loads((tmp_path / "eval.csv.timing.json").read_text())["frames"] == 3
    assert cli.run(args[:-3] + ["--allocation-frame", "9"]) == 1


def test_sweep_writes_tables(tmp_path, clip_dirs):
    frames, masks = clip_dirs
    ls = model_file(tmp_path, "latent_scaling", "ls")
    implicit = model_file(tmp_path, "implicit", "implicit")
    reference = tmp_path / "reference.csv"
    pd.DataFrame({"bpp": [0.5, 1, 2, 4, 8], "roi_psnr": [20, 24, 28, 32, 36], "nonroi_psnr": [18, 22, 26, 30, 34]}).to_csv(
        reference, index=False
    )
    out = tmp_path / "sweep"
    args = ["sweep", "--models", str(ls), str(implicit), "--frames", str(frames), "--masks", str(masks),
            "--ga", "1,4", "--threads", "2", "--out", str(out), "--reference", str(reference)]
    assert cli.run(args) == 0
    table = pd.read_csv(out / "sweep.csv")
    assert table["ga"].tolist() == [1.0, 4.0, 1.0]
    assert list(pd.read_csv(out / "bd_rate.csv").columns) == cli.BD_COLUMNS
    assert cli.run(args[:-2] + ["--reference", str(tmp_path / "absent.csv")]) == 2
