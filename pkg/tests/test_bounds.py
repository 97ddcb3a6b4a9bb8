import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapelink.bounds import (
    BoundsError,
    GainPoint,
    SpectrumAllocation,
    TgModel,
    calibrated_noise,
    capacity,
    capacity_at_K,
    channel_spectrum,
    gain_sweep,
    optimal_allocation,
    optimize_over_K,
    sndr_constrained,
    sndr_iid,
    tg_papr,
    tg_power,
)
from shapelink.signal_model import ChannelModel, NoiseSpec, builtin_channel

from .oracles import grid_capacity_max, slsqp_capacity_max

TOY = np.array([0.6, 0.5, 0.3])
H2_8 = channel_spectrum(TOY, 8)


def test_spectrum_parseval():
    ch = builtin_channel("A")
    H2 = channel_spectrum(ch.taps, 512)
    assert H2.mean() == pytest.approx(ch.energy, rel=1e-12)
    with pytest.raises(ValueError):
        channel_spectrum(ch.taps, 16)


def test_zero_allocation_has_zero_rate():
    alloc = SpectrumAllocation(np.zeros(8), H2_8)
    assert capacity(alloc, NoiseSpec(0.1, 0.1)) == 0.0


def test_flat_channel_reduces_to_awgn():
    # flat q = P on |H| = 1 gives 0.5 log2(1 + 2P / n)
    alloc = SpectrumAllocation(np.full(64, 2.0), np.ones(64))
    assert capacity(alloc, NoiseSpec(0.3, 0.1)) == pytest.approx(0.5 * math.log2(1 + 4 / 0.4))


def test_capacity_matches_resummation():
    rng = np.random.default_rng(0)
    q = rng.exponential(size=32)
    H2 = rng.exponential(size=32)
    n = 0.05
    ref = sum(math.log2(1 + 2 * qi * hi / n) for qi, hi in zip(q, H2)) / (2 * 32)
    assert capacity(SpectrumAllocation(q, H2), NoiseSpec(n, 0.0)) == pytest.approx(ref, rel=1e-12)


def test_allocation_validation():
    with pytest.raises(ValueError):
        SpectrumAllocation(np.array([-1.0, 1.0]), np.ones(2))
    with pytest.raises(ValueError):
        SpectrumAllocation(np.ones(3), np.ones(2))
    with pytest.raises(ValueError):
        optimal_allocation(np.ones(4), NoiseSpec(0.1, 0.0), 0.0, 1.0)
    with pytest.raises(ValueError):
        optimal_allocation(np.zeros(4), NoiseSpec(0.1, 0.0), 1.0, 1.0)


@pytest.mark.parametrize("P, K, n", [(1.0, 0.1, 0.01), (1.0, 0.3, 0.05), (1.0, 10.0, 0.02), (2.0, 0.5, 0.2)])
def test_allocation_beats_grid_oracle(P, K, n):
    q, _, _ = optimal_allocation(np.sqrt(H2_8), NoiseSpec(n, 0.0), P, K)
    alloc = SpectrumAllocation(q, H2_8)
    assert alloc.transmit_power <= P * (1 + 1e-9)
    assert alloc.receive_power <= K * (1 + 1e-9)
    got = capacity(alloc, NoiseSpec(n, 0.0))
    ref = grid_capacity_max(H2_8, n, P, K)
    assert got >= ref - 1e-9
    # a general-purpose optimiser finds nothing better, and gets close
    ref2 = slsqp_capacity_max(H2_8, n, P, K)
    assert got >= ref2 - 1e-7
    assert got - ref2 < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(-20.0, 10.0), st.floats(1e-3, 1.0), st.integers(0, 2**32 - 1))
def test_kkt_conditions(P, kdb, n, seed):
    rng = np.random.default_rng(seed)
    H2 = rng.exponential(size=16) + 1e-3
    K = 10 ** (kdb / 10)
    noise = NoiseSpec(n, 0.0)
    q, a, b = optimal_allocation(np.sqrt(H2), noise, P, K)
    alloc = SpectrumAllocation(q, H2)
    assert a >= 0 and b >= 0
    assert alloc.transmit_power <= P * (1 + 1e-8)
    assert alloc.receive_power <= K * (1 + 1e-8)
    # complementary slackness: an active multiplier means a tight constraint
    if b > 1e-9:
        assert alloc.transmit_power == pytest.approx(P, rel=1e-6)
    if a > 1e-9:
        assert alloc.receive_power == pytest.approx(K, rel=1e-6)
    # stationarity: no feasible shift of power between two bins improves the rate
    base = capacity(alloc, noise)
    for _ in range(10):
        i, j = rng.choice(16, 2, replace=False)
        d = 1e-4 * max(q[i], 1e-3)
        # move d from i to j at constant receive power... or constant transmit
        trial = q.copy()
        trial[i] = max(trial[i] - d, 0.0)
        trial[j] += (q[i] - trial[i]) * min(1.0, H2[i] / H2[j])
        t = SpectrumAllocation(trial, H2)
        if t.transmit_power <= P * (1 + 1e-12) and t.receive_power <= K * (1 + 1e-12):
            assert capacity(t, noise) <= base + 1e-9


def test_water_filling_regime():
    # a huge receive budget leaves only the transmit constraint
    noise = NoiseSpec(0.05, 0.0)
    q, a, b = optimal_allocation(np.sqrt(H2_8), noise, 1.0, 1e6)
    assert a == 0.0 and b > 0
    on = q > 0
    level = q[on] + noise.total / (2 * H2_8[on])
    np.testing.assert_allclose(level, level[0], rtol=1e-9)
    assert q.mean() == pytest.approx(1.0)


def test_receive_only_regime():
    # a huge transmit budget leaves only the receive constraint
    noise = NoiseSpec(0.05, 0.0)
    q, a, b = optimal_allocation(np.sqrt(H2_8), noise, 1e6, 0.2)
    assert b == 0.0 and a > 0
    on = q > 0
    level = (q[on] + noise.total / (2 * H2_8[on])) * H2_8[on]
    np.testing.assert_allclose(level, level[0], rtol=1e-9)
    assert np.mean(q * H2_8) == pytest.approx(0.2)


def test_single_tap_capacity_is_K_independent_above_free_power():
    # flat channel: water-filling uses receive power P * h^2, so larger K changes nothing
    H2 = np.full(16, 0.25)
    rates = [capacity_at_K(H2, K, 30.0, 20.0).rate for K in (0.3, 1.0, 5.0)]
    assert max(rates) - min(rates) < 1e-9
    pr = 0.25
    n = 1 / 1e3 + 2 * pr / 1e2
    assert rates[0] == pytest.approx(0.5 * math.log2(1 + 2 * pr / n), rel=1e-9)


def test_calibrated_noise():
    noise = calibrated_noise(1.0, 0.1, 40.0, 20.0)
    assert noise.N0 == pytest.approx(1e-4)
    assert noise.NA == pytest.approx(2e-3)


def test_optimize_over_K_matches_fine_grid():
    ch = builtin_channel("A")
    H2 = channel_spectrum(ch.taps, 512)
    best = optimize_over_K(H2, 40.0, 18.0)
    s2 = H2.mean()
    grid = 10 * math.log10(s2) + np.arange(-40.0, 10.0, 0.25)
    fine = max(capacity_at_K(H2, 10 ** (k / 10), 40.0, 18.0).rate for k in grid)
    assert best.rate >= fine - 1e-4


def test_rate_increases_with_sndr_and_tstnr():
    H2 = channel_spectrum(builtin_channel("A").taps, 256)
    r = [optimize_over_K(H2, 40.0, s).rate for s in (5.0, 15.0, 25.0)]
    assert r[0] < r[1] < r[2]
    assert optimize_over_K(H2, 45.0, 15.0).rate >= r[1]


def test_dft_size_convergence():
    ch = builtin_channel("A")
    a = capacity_at_K(channel_spectrum(ch.taps, 2048), 0.05, 40.0, 18.0).rate
    b = capacity_at_K(channel_spectrum(ch.taps, 4096), 0.05, 40.0, 18.0).rate
    assert abs(a - b) < 1e-3


def test_tg_power_limits():
    s2 = 0.09
    # no truncation as gamma grows
    assert tg_power(TgModel(s2, 1e3)) == pytest.approx(s2, rel=1e-9)
    # tight truncation approaches a uniform distribution on [-sqrt(g), sqrt(g)]
    g = 1e-4
    assert tg_power(TgModel(s2, g)) == pytest.approx(g / 3, rel=1e-3)
    with pytest.raises(ValueError):
        TgModel(0.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(-30.0, 10.0), st.floats(0.01, 3.0))
def test_tg_power_increasing_and_bounded(s2, gdb, step):
    g1 = 10 ** (gdb / 10)
    g2 = g1 * 10 ** (step / 10)
    k1 = tg_power(TgModel(s2, g1))
    k2 = tg_power(TgModel(s2, g2))
    assert 0 < k1 <= k2 <= s2 * (1 + 1e-12)
    if g1 < 10 * s2:
        assert k1 < k2
    # truncation to [-sqrt(g), sqrt(g)] caps the second moment at g
    assert k1 <= g1


def test_tg_papr_matches_numerical_integral():
    from scipy.integrate import quad

    s2, g = 0.09, 0.09 * 10 ** (-0.5)
    t = math.sqrt(g)
    pdf = lambda x: math.exp(-x * x / (2 * s2))
    k_num = quad(lambda x: x * x * pdf(x), -t, t)[0] / quad(pdf, -t, t)[0]
    k, papr = tg_papr(TgModel(s2, g))
    assert k == pytest.approx(k_num, rel=1e-9)
    assert papr == pytest.approx(g / k_num, rel=1e-9)


def test_sndr_inversions():
    ch = builtin_channel("A")
    H2 = channel_spectrum(ch.taps, 512)
    s_iid = sndr_iid(H2, 0.9, 40.0)
    flat = SpectrumAllocation(np.ones_like(H2), H2)
    rate = capacity(flat, calibrated_noise(1.0, flat.receive_power, 40.0, s_iid))
    assert rate == pytest.approx(0.9, abs=1e-3)
    with pytest.raises(BoundsError):
        sndr_iid(H2, 20.0, 40.0)
    k = tg_power(TgModel(ch.energy, ch.energy / 10))
    s_c = sndr_constrained(H2, 0.9, 40.0, k)
    assert capacity_at_K(H2, k, 40.0, s_c).rate == pytest.approx(0.9, abs=1e-3)


def test_gain_sweep_columns():
    pts = gain_sweep(builtin_channel("A"), 1.8, 40.0, [-14.0, -10.0], 10.13, N=512)
    assert GainPoint.FIELDS == ("gamma_db", "papr_tg_db", "papr_gain_db", "sndr_gain_db", "g_t_db")
    for p in pts:
        assert p.g_t_db == pytest.approx(p.papr_gain_db + p.sndr_gain_db)
        assert p.papr_gain_db == pytest.approx(10.13 - p.papr_tg_db)
        assert len(p.row()) == 5
    # tighter peaks give lower PAPR
    assert pts[0].papr_tg_db < pts[1].papr_tg_db
