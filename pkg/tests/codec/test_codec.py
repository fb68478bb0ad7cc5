import numpy as np
import pytest

from helpers import randomize_zero_layers, tiny_config
from roicodec.base.exceptions import BitstreamError, ConfigError, DimensionError, NumericError
from roicodec.base.types import ChunkKind, FrameType, Variant
from roicodec.operators.codec.api import (
    VideoClip,
    bit_allocation_map,
    decode_clip,
    encode_clip,
    pad_array,
    padded_size,
)
from roicodec.operators.codec.bitstream import Bitstream, chunk_order
from roicodec.operators.codec.config import CodecConfig
from roicodec.operators.networks.api import VideoCodecModel
from roicodec.operators.roi_masks.api import RoiMask

VARIANTS = ["ssf", "implicit", "latent_scaling"]


def moving_clip(frames, h=8, w=12, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    clip = []
    masks = []
    for t in range(frames):
        base = 0.5 + 0.4 * np.sin((xs + t) / 3.0) * np.cos(ys / 4.0)
        frame = np.stack([base, 1 - base, 0.5 * base]) + rng.normal(scale=0.02, size=(3, h, w))
        clip.append(np.clip(frame, 0, 1)[None].astype(np.float32))
        masks.append(RoiMask(((xs + t) % w < w // 2).astype(np.uint8), t))
    return VideoClip(clip, masks)


def make_model(variant, rng, seed=0):
    return randomize_zero_layers(VideoCodecModel(tiny_config(variant=variant, seed=seed)), rng)


def test_single_frame_is_one_iframe_group(rng):
    model = make_model("ssf", rng)
    result = encode_clip(moving_clip(1), model)
    frames = result.bitstream.frames
    assert len(frames) == 1
    assert frames[0].frame_type is FrameType.IFRAME
    assert set(frames[0].chunks) == {ChunkKind.IFRAME_HYPER, ChunkKind.IFRAME_LATENT}


def test_gop_structure():
    types = [frame.frame_type for frame in Bitstream.from_bytes(
        encode_clip(moving_clip(13), VideoCodecModel(tiny_config()), config=CodecConfig(gop_size=12)).bitstream.to_bytes()
    ).frames]
    assert [i for i, t in enumerate(types) if t is FrameType.IFRAME] == [0, 12]


def test_gain_chunks_precede_the_latent_they_scale():
    order = chunk_order(Variant.LATENT_SCALING, FrameType.PFRAME)
    assert order[:2] == [ChunkKind.GAIN_HYPER, ChunkKind.GAIN_LATENT]
    assert order.index(ChunkKind.GAIN_LATENT) < order.index(ChunkKind.RESIDUAL_LATENT)


@pytest.mark.parametrize("variant", VARIANTS)
def test_decoder_reproduces_encoder_reconstructions(rng, variant):
    model = make_model(variant, rng)
    clip = moving_clip(13)
    result = encode_clip(clip, model, variant, config=CodecConfig(gop_size=12))
    stream = Bitstream.from_bytes(result.bitstream.to_bytes())
    masks = clip.masks if variant == "latent_scaling" else None
    decoded = decode_clip(stream, model, masks)
    assert len(decoded) == 13
    for enc, dec in zip(result.reconstructions, decoded):
        assert enc.dtype == dec.dtype
        np.testing.assert_array_equal(enc, dec)


def test_implicit_variant_decodes_without_masks(rng):
    model = make_model("implicit", rng)
    result = encode_clip(moving_clip(3), model)
    decoded = decode_clip(result.bitstream, model)
    np.testing.assert_array_equal(decoded[-1], result.reconstructions[-1])


def test_amplified_gain_survives_the_header(rng):
    model = make_model("latent_scaling", rng)
    clip = moving_clip(3)
    result = encode_clip(clip, model, ga=2.7)
    stream = Bitstream.from_bytes(result.bitstream.to_bytes())
    assert stream.header.ga == pytest.approx(2.7, rel=1e-6)
    for enc, dec in zip(result.reconstructions, decode_clip(stream, model, clip.masks)):
        np.testing.assert_array_equal(enc, dec)


def test_latent_scaling_needs_the_encoder_masks(rng):
    model = make_model("latent_scaling", rng)
    clip = moving_clip(2)
    bitstream = encode_clip(clip, model).bitstream
    with pytest.raises(ConfigError):
        decode_clip(bitstream, model)
    other = [RoiMask(1 - m.values, m.frame_index) for m in clip.masks]
    with pytest.raises(BitstreamError):
        decode_clip(bitstream, model, other)


def test_model_hash_is_checked(rng):
    model = make_model("ssf", rng)
    bitstream = encode_clip(moving_clip(1), model).bitstream
    with pytest.raises(BitstreamError):
        decode_clip(bitstream, make_model("ssf", rng, seed=1))


def test_reported_bits_match_the_coded_length(rng):
    model = make_model("latent_scaling", rng)
    result = encode_clip(moving_clip(4), model)
    for report, frame in zip(result.reports, result.bitstream.frames):
        coded_bits = 8 * report["bytes_coded"]
        assert report["bits_total"] == pytest.approx(report["bits_main"] + report["bits_hyper"] + report["bits_gain"])
        assert abs(coded_bits - report["bits_total"]) <= 0.01 * report["bits_total"] + 64 * len(frame.chunks)
        assert report["bits_gain"] > 0


def test_every_tampered_byte_is_detected(rng):
    model = make_model("ssf", rng)
    blob = encode_clip(moving_clip(3), model).bitstream.to_bytes()
    for position in np.linspace(0, len(blob) - 1, 40).astype(int):
        tampered = bytearray(blob)
        tampered[position] ^= 0x5A
        with pytest.raises(BitstreamError):
            decode_clip(Bitstream.from_bytes(bytes(tampered)), model)


def test_truncated_stream_is_rejected(rng):
    blob = encode_clip(moving_clip(2), make_model("ssf", rng)).bitstream.to_bytes()
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(blob[:-3])
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(blob + b"\x00")


def test_bitstream_file_roundtrip(tmp_path, rng):
    model = make_model("ssf", rng)
    result = encode_clip(moving_clip(2), model)
    path = tmp_path / "clip.rvbs"
    size = result.bitstream.write(path)
    assert path.stat().st_size == size
    np.testing.assert_array_equal(decode_clip(Bitstream.read(path), model)[1], result.reconstructions[1])


def test_unaligned_frames_are_padded_and_cropped(rng):
    model = make_model("implicit", rng)
    clip = moving_clip(2, h=10, w=14)
    result = encode_clip(clip, model)
    assert result.reconstructions[0].shape == (1, 3, 10, 14)
    assert decode_clip(result.bitstream, model)[1].shape == (1, 3, 10, 14)


def test_reflect_padding():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert padded_size(10, 14, 4) == (12, 16)
    np.testing.assert_array_equal(pad_array(x, 4, 4), [[0, 1, 2, 1], [3, 4, 5, 4], [0, 1, 2, 1], [3, 4, 5, 4]])


def test_frames_only_depend_on_their_own_gop(rng):
    model = make_model("ssf", rng)
    clip = moving_clip(6)
    changed = moving_clip(6)
    changed.frames[1] = np.clip(changed.frames[1] + 0.3, 0, 1)
    config = CodecConfig(gop_size=3)
    a = encode_clip(clip, model, config=config).reconstructions
    b = encode_clip(changed, model, config=config).reconstructions
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[1], b[1])
    for i in range(3, 6):
        np.testing.assert_array_equal(a[i], b[i])


def test_masks_required_for_mask_aware_variants(rng):
    clip = VideoClip(moving_clip(1).frames)
    with pytest.raises(ConfigError):
        encode_clip(clip, make_model("implicit", rng))


def test_gain_amplifier_only_for_latent_scaling(rng):
    with pytest.raises(ConfigError):
        encode_clip(moving_clip(1), make_model("implicit", rng), ga=2.0)


def test_variant_argument_must_match_model(rng):
    with pytest.raises(ConfigError):
        encode_clip(moving_clip(1), make_model("ssf", rng), variant="implicit")


def test_non_finite_input_names_the_frame(rng):
    clip = moving_clip(3)
    clip.frames[2][0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="frame 2"):
        encode_clip(clip, make_model("ssf", rng))


def test_clip_shapes_are_validated():
    frames = moving_clip(2).frames
    with pytest.raises(DimensionError):
        VideoClip([frames[0], np.zeros((1, 3, 4, 4))])
    with pytest.raises(DimensionError):
        VideoClip(frames, [RoiMask(np.zeros((8, 12), dtype=np.uint8))])


@pytest.mark.parametrize("frame_index", [0, 1])
def test_allocation_map_accounts_for_main_bits(rng, frame_index):
    model = make_model("latent_scaling", rng)
    clip = moving_clip(2)
    result = encode_clip(clip, model)
    allocation = bit_allocation_map(result.bitstream, model, frame_index, clip.masks, clip.frames[frame_index])
    assert allocation.bpp.shape == (2, 3)
    assert allocation.main_bits == pytest.approx(result.reports[frame_index]["bits_main"], rel=1e-9)
    assert allocation.psnr.shape == (8, 12)
    assert allocation.psnr.max() <= 99.0


def test_uniform_prior_on_constant_input_gives_uniform_allocation():
    model = VideoCodecModel(tiny_config())
    # zero weights leave constant biases: the latent, mu and sigma are the same in every cell
    for name, tensor in model.iframe.named_parameters():
        if name.endswith("weight"):
            tensor.data = np.zeros_like(tensor.data)
    clip = VideoClip([np.full((1, 3, 16, 16), 0.5, dtype=np.float32)])
    result = encode_clip(clip, model)
    bpp = bit_allocation_map(result.bitstream, model, 0).bpp
    assert bpp.shape == (4, 4)
    np.testing.assert_allclose(bpp, bpp[0, 0])
