import numpy as np
import pytest

from roicodec.base.exceptions import BitstreamError, RangeCoderError
from roicodec.operators.entropy.api import cdf_quantize
from roicodec.operators.entropy.range_coder import Bitchunk, range_decode, range_encode


def ideal_bits(symbols, cdfs):
    return sum(-np.log2((cdf[s + 1] - cdf[s]) / 65536.0) for s, cdf in zip(symbols, cdfs))


def test_empty_chunk():
    chunk = range_encode([], [])
    assert chunk.data == b"" and chunk.symbol_count == 0
    assert range_decode(chunk, []) == []


def test_three_symbol_source_near_entropy(rng):
    pmf = np.array([0.5, 0.3, 0.2])
    cdf = cdf_quantize(pmf)
    symbols = rng.choice(3, size=100_000, p=pmf).tolist()
    cdfs = [cdf] * len(symbols)
    chunk = range_encode(symbols, cdfs)
    assert range_decode(chunk, cdfs) == symbols
    entropy = -(pmf * np.log2(pmf)).sum() * len(symbols)
    empirical = ideal_bits(symbols, cdfs)
    assert chunk.num_bits <= empirical * 1.01 + 32
    assert abs(empirical - entropy) / entropy < 0.01


def test_fuzzed_roundtrips(rng):
    failures = 0
    for _ in range(10_000):
        count = int(rng.integers(1, 9))
        cdfs, symbols = [], []
        for _ in range(count):
            alphabet = int(rng.integers(1, 40))
            pmf = rng.dirichlet(np.full(alphabet, float(rng.choice([0.05, 0.5, 5.0]))))
            cdf = cdf_quantize(pmf)
            cdfs.append(cdf)
            symbols.append(int(rng.integers(0, alphabet)))
        chunk = range_encode(symbols, cdfs)
        failures += range_decode(chunk, cdfs) != symbols
        assert chunk.num_bits <= ideal_bits(symbols, cdfs) * 1.01 + 64
    assert failures == 0


def test_extreme_probabilities_roundtrip():
    cdf = cdf_quantize(np.array([1 - 2e-5, 1e-5, 1e-5]))
    symbols = [0] * 5000 + [1, 2] * 50 + [0] * 5000
    cdfs = [cdf] * len(symbols)
    assert range_decode(range_encode(symbols, cdfs), cdfs) == symbols


def test_symbol_outside_support():
    with pytest.raises(RangeCoderError):
        range_encode([3], [cdf_quantize(np.full(3, 1 / 3))])


def test_chunk_serialization_and_tamper_detection(rng):
    cdf = cdf_quantize(np.full(8, 1 / 8))
    symbols = rng.integers(0, 8, size=200).tolist()
    chunk = range_encode(symbols, [cdf] * 200)
    blob = chunk.to_bytes()
    parsed, end = Bitchunk.from_bytes(blob)
    assert parsed == chunk and end == len(blob)
    tampered = bytearray(blob)
    tampered[len(blob) // 2] ^= 0x10
    with pytest.raises(BitstreamError):
        Bitchunk.from_bytes(bytes(tampered))
    with pytest.raises(BitstreamError):
        Bitchunk.from_bytes(blob[:-1])


def test_symbol_count_mismatch():
    cdf = cdf_quantize(np.full(2, 0.5))
    chunk = range_encode([0, 1], [cdf, cdf])
    with pytest.raises(BitstreamError):
        range_decode(chunk, [cdf])
