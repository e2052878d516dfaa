import numpy as np
import pytest
from scipy import stats

from reflect.rng import RngStream, gaussian_block, norm_ppf, philox4x64, raw_block, word_to_uniform

M = 0xFFFFFFFFFFFFFFFF


def _philox(ctr, key):
    out = np.empty(4, dtype=np.uint64)
    philox4x64(*(np.uint64(c) for c in ctr), np.uint64(key[0]), np.uint64(key[1]), out)
    return [int(v) for v in out]


@pytest.mark.parametrize("ctr,key,expected", [
    ((0, 0, 0, 0), (0, 0),
     (0x16554D9ECA36314C, 0xDB20FE9D672D0FDC, 0xD7E772CEE186176B, 0x7E68B68AEC7BA23B)),
    ((M, M, M, M), (M, M),
     (0x87B092C3013FE90B, 0x438C3C67BE8D0224, 0x9CC7D7C69CD777B6, 0xA09CAEBF594F0BA0)),
    ((0x243F6A8885A308D3, 0x13198A2E03707344, 0xA4093822299F31D0, 0x082EFA98EC4E6C89),
     (0x452821E638D01377, 0xBE5466CF34E90C6C),
     (0xA528F45403E61D95, 0x38C72DBD566E9788, 0xA5A1610E72FD18B5, 0x57BD43B5E52B7FE6)),
])
def test_philox_known_answers(ctr, key, expected):
    assert tuple(_philox(ctr, key)) == expected


def test_raw_block_matches_kernel():
    assert [int(v) for v in raw_block(7, 3, 11)] == _philox((11, 0, 0, 0), (7, 3))


@pytest.mark.parametrize("p", [1e-300, 1e-20, 1e-10, 0.001, 0.02425, 0.1, 0.3, 0.5, 0.7, 0.97575, 0.999, 1 - 1e-12])
def test_norm_ppf_matches_scipy(p):
    assert norm_ppf(p) == pytest.approx(stats.norm.ppf(p), rel=1e-12, abs=1e-12)


def test_word_to_uniform_open_interval():
    assert 0.0 < word_to_uniform(np.uint64(0)) < 1e-15
    assert 1.0 - 1e-15 < word_to_uniform(np.uint64(M)) < 1.0


def test_gaussian_block_deterministic_and_resumable():
    a = gaussian_block(RngStream(5, 2), 37)
    b = gaussian_block(RngStream(5, 2), 37)
    assert np.array_equal(a, b)
    s = RngStream(5, 2)
    parts = np.concatenate([gaussian_block(s, 10), gaussian_block(s, 3), gaussian_block(s, 24)])
    assert np.array_equal(parts, a)
    assert s.counter == 37
    mid = gaussian_block(RngStream(5, 2, counter=13), 5)
    assert np.array_equal(mid, a[13:18])


def test_streams_differ():
    a = gaussian_block(RngStream(5, 2), 100)
    b = gaussian_block(RngStream(5, 3), 100)
    c = gaussian_block(RngStream(6, 2), 100)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.35


def test_gaussian_block_moments():
    x = gaussian_block(RngStream(2024, 0), 10 ** 6)
    assert -0.01 < x.mean() < 0.01
    assert 0.99 < x.var() < 1.01
    assert stats.kstest(x[:100000], "norm").pvalue > 0.001


def test_stream_validation():
    with pytest.raises(ValueError):
        RngStream(-1, 0)
    with pytest.raises(ValueError):
        gaussian_block(RngStream(0, 0), 0)
    assert RngStream(4, 1, 9).spawn(3) == RngStream(4, 3, 0)
