import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FixedDraws
from privgps.geo import GeoPoint, GridSpec, PolarRegion, haversine_m, offset_m, one_hot
from privgps.mechanisms import (
    CoinPair, NoPrivacy, RandomSource, coins_for_epsilon, epsilon_of, radius_privatize, rr_bit, rr_counts,
    rr_vector,
)


@pytest.mark.parametrize("p,q", [(-0.1, 0.5), (1.1, 0.5), (0.5, 0.0), (0.5, 1.0), (0.5, 1.5)])
def test_coinpair_rejects(p, q):
    with pytest.raises(ValueError):
        CoinPair(p, q)


def test_rr_bit_examples():
    assert rr_bit(True, CoinPair(1.0, 0.3), RandomSource(5)) is True
    assert rr_bit(False, CoinPair(0.0, 0.999999), FixedDraws([0.2, 0.5])) is True
    draws = FixedDraws([0.7, 0.2])
    assert rr_bit(True, CoinPair(0.5, 0.5), draws) is True
    assert draws.used == 2


def test_rr_bit_draw_consumption():
    d = FixedDraws([0.1])
    assert rr_bit(False, CoinPair(0.5, 0.5), d) is False
    assert d.used == 1
    d = FixedDraws([0.9, 0.9])
    assert rr_bit(True, CoinPair(0.5, 0.5), d) is False
    assert d.used == 2


def test_rr_bit_p0_q_near_one_always_yes():
    coins = CoinPair(0.0, 1 - 1e-12)
    rng = RandomSource(1)
    assert all(rr_bit(False, coins, rng) for _ in range(1000))


def test_rr_vector_identity_and_all_ones(grid3):
    rng = RandomSource(3)
    truth = np.array([0, 1, 1, 0, 1, 0, 0, 0, 1], dtype=np.uint8)
    assert rr_vector(truth, CoinPair(1.0, 0.5), rng).tolist() == truth.tolist()
    out = rr_vector(one_hot(4, grid3), CoinPair(0.0, 1 - 1e-15), rng)
    assert out.tolist() == [1] * 9


def test_rr_vector_seeded_trace():
    # PCG64(2024) first doubles: 0.6758, 0.2143, 0.3095, 0.7995, 0.9958, 0.1422
    # bit0: 0.676 >= .5 -> noise 0.214 < .5 -> 1; bit1: 0.309 < .5 -> truth 0;
    # bit2: 0.799 -> noise 0.996 -> 0; five draws consumed
    rng = RandomSource(2024)
    out = rr_vector([1, 0, 0], CoinPair(0.5, 0.5), rng)
    assert out.tolist() == [1, 0, 0]
    assert rng.uniform() == 0.1422318152800518


def test_rr_vector_matches_rr_bit_loop():
    truth = np.random.default_rng(0).integers(0, 2, 500)
    coins = CoinPair(0.3, 0.7)
    a = rr_vector(truth, coins, RandomSource(11))
    rng = RandomSource(11)
    b = [rr_bit(bool(t), coins, rng) for t in truth]
    assert a.tolist() == [int(x) for x in b]


def test_rr_counts_matches_per_owner_vectors(grid3):
    cells = np.array([0, 4, -1, 8, 8, 2, -1, 5])
    coins = CoinPair(0.6, 0.4)
    counts = rr_counts(cells, 9, coins, RandomSource(99))
    rng = RandomSource(99)
    expect = np.zeros(9, dtype=np.int64)
    for c in cells:
        truth = one_hot(c, grid3) if c >= 0 else np.zeros(9, np.uint8)
        expect += rr_vector(truth, coins, rng)
    assert counts.tolist() == expect.tolist()


CHANNEL_GRID = [(p, q) for p in (0.25, 0.5, 0.75, 0.9) for q in (0.25, 0.5, 0.75)]


@pytest.mark.parametrize("p,q", CHANNEL_GRID)
def test_channel_frequencies_and_dp_bound(p, q):
    n = 200_000
    coins = CoinPair(p, q)
    rng = RandomSource(int(p * 1000 + q * 100))
    ones = rr_vector(np.ones(n, np.uint8), coins, rng).mean()
    zeros = rr_vector(np.zeros(n, np.uint8), coins, rng).mean()
    for truth, got in ((1, ones), (0, zeros)):
        expect = p * truth + (1 - p) * q
        se = math.sqrt(expect * (1 - expect) / n)
        assert abs(got - expect) <= 4 * se
    assert math.log(ones / zeros) <= epsilon_of(coins) + 0.05
    assert math.log((1 - zeros) / (1 - ones)) <= epsilon_of(coins) + 0.05


def test_rr_vector_bits_uncorrelated():
    n, k = 20_000, 6
    coins = CoinPair(0.5, 0.5)
    rng = RandomSource(17)
    out = np.array([rr_vector(np.zeros(k, np.uint8), coins, rng) for _ in range(n)], dtype=float)
    corr = np.corrcoef(out, rowvar=False)
    # sample correlation of independent bits has sd ~ 1/sqrt(n)
    off = corr[~np.eye(k, dtype=bool)]
    assert np.all(np.abs(off) <= 4 / math.sqrt(n))


def test_radius_examples():
    p = GeoPoint(34.0689, -118.4452)
    assert radius_privatize(p, 0.0, RandomSource(1)) == p
    for seed in range(50):
        assert haversine_m(radius_privatize(p, 500, RandomSource(seed)), p) <= 501
    out = radius_privatize(GeoPoint(0, 0), 1000, FixedDraws([0.25, 0.0]))
    n, e = offset_m(GeoPoint(0, 0), out)
    assert n == pytest.approx(0, abs=1e-9)
    assert e == pytest.approx(500, abs=1e-6)


def test_radius_polar_and_negative():
    with pytest.raises(PolarRegion):
        radius_privatize(GeoPoint(89.5, 0), 10, RandomSource(0))
    with pytest.raises(ValueError):
        radius_privatize(GeoPoint(0, 0), -1, RandomSource(0))


@pytest.mark.parametrize("r", [50.0, 500.0, 5000.0])
def test_radius_uniform_disk(r):
    p = GeoPoint(34.0689, -118.4452)
    rng = RandomSource(int(r))
    d = np.array([haversine_m(radius_privatize(p, r, rng), p) for _ in range(10_000)])
    assert d.max() <= r + 1
    assert 0.64 * r <= d.mean() <= 0.69 * r
    assert abs((d <= r / 2).mean() - 0.25) <= 0.02


def test_epsilon_examples():
    assert epsilon_of(CoinPair(0.0, 0.3)) == 0.0
    assert epsilon_of(CoinPair(0.5, 0.5)) == pytest.approx(math.log(3), abs=1e-15)
    with pytest.raises(NoPrivacy):
        epsilon_of(CoinPair(1.0, 0.5))


def test_coins_for_epsilon_examples():
    c = coins_for_epsilon(math.log(3))
    assert c.p == pytest.approx(0.5, abs=1e-15) and c.q == 0.5
    assert coins_for_epsilon(1e-9).p < 1e-9
    for eps in (0.1, 0.5, 1, 2, 5):
        assert epsilon_of(coins_for_epsilon(eps)) == pytest.approx(eps, abs=1e-12)
    for bad in (0, -1, math.inf, math.nan):
        with pytest.raises(ValueError):
            coins_for_epsilon(bad)


@given(st.floats(0.0, 0.999), st.floats(0.01, 0.99))
def test_epsilon_matches_channel_ratio(p, q):
    c = CoinPair(p, q)
    ratios = [c.p_yes_given_true / c.p_yes_given_false, (1 - c.p_yes_given_false) / (1 - c.p_yes_given_true)]
    assert epsilon_of(c) == pytest.approx(math.log(max(ratios)), rel=1e-9, abs=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 2**64 - 1))
def test_determinism(seed):
    p = GeoPoint(10, 10)
    coins = CoinPair(0.4, 0.6)
    g = GridSpec(GeoPoint(0, 0), 1000, 2, 2)
    runs = []
    for _ in range(2):
        rng = RandomSource(seed)
        runs.append((rr_bit(True, coins, rng), rr_vector(one_hot(1, g), coins, rng).tolist(),
                     radius_privatize(p, 300, rng)))
    assert runs[0] == runs[1]


def test_session_streams_differ():
    a = RandomSource.for_session(7, 1)
    b = RandomSource.for_session(7, 2)
    assert [a.uniform() for _ in range(5)] != [b.uniform() for _ in range(5)]
    c = RandomSource.for_session(7, 1)
    assert RandomSource.for_session(7, 1).uniform() == c.uniform()
