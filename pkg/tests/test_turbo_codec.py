import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapelink.turbo_codec import (
    RSC_37_23,
    RscSpec,
    TurboConfig,
    bresenham_mask,
    build_code,
    log_map,
    rsc_encode,
    turbo_decode,
    turbo_encode,
)

from .oracles import exhaustive_component_map


def test_rsc_impulse_response():
    # 37/23: feedback 1 + D^3 + D^4, feedforward 1 + D + D^2 + D^3 + D^4
    bits = np.zeros(12, dtype=np.uint8)
    bits[0] = 1
    sys_out, par = rsc_encode(bits)
    np.testing.assert_array_equal(sys_out, bits)
    # long division of (1+D+D^2+D^3+D^4) by (1+D^3+D^4) over GF(2)
    a = np.zeros(12, dtype=int)
    for k in range(12):
        a[k] = (k == 0) ^ (a[k - 3] if k >= 3 else 0) ^ (a[k - 4] if k >= 4 else 0)
    ref = [sum(a[k - i] for i in range(5) if k - i >= 0) % 2 for k in range(12)]
    np.testing.assert_array_equal(par, ref)


def test_rsc_termination_returns_to_zero():
    rng = np.random.default_rng(0)
    nxt, _ = RSC_37_23.trellis
    for _ in range(20):
        bits = rng.integers(0, 2, 50)
        sys_out, par = rsc_encode(bits, terminate=True)
        assert sys_out.size == par.size == 54
        s = 0
        for u in sys_out:
            s = nxt[s, u]
        assert s == 0


def test_rsc_spec_validation():
    with pytest.raises(ValueError):
        RscSpec(memory=2, feedforward=0o37, feedback=0o7)


@pytest.mark.parametrize("rate, m, n", [(0.6, 3, 6828), (0.9, 2, 4552), (0.6, 1, 6827)])
def test_frame_sizes(rate, m, n):
    code = build_code(TurboConfig(rate=rate, bits_per_symbol=m))
    assert code.n_coded == n
    assert code.realized_rate == pytest.approx(rate, abs=2e-3)


@pytest.mark.parametrize("rate", [0.6, 0.9])
def test_puncturing_balanced(rate):
    code = build_code(TurboConfig(rate=rate))
    assert abs(code.keep1.size - code.keep2.size) <= 1
    pos1, pos2 = code.parity_positions()
    allpos = np.concatenate([pos1, pos2])
    assert np.unique(allpos).size == allpos.size
    assert allpos.max() == code.n_coded - 1


def test_bresenham_mask():
    for n, keep in ((10, 3), (4096, 1228), (7, 7), (5, 0)):
        mask = bresenham_mask(n, keep)
        assert mask.sum() == keep
    gaps = np.diff(np.flatnonzero(bresenham_mask(100, 25)))
    assert set(gaps) == {4}


def test_interleaver_is_seeded_permutation():
    a = build_code(TurboConfig(interleaver_seed=5))
    b = build_code(TurboConfig(interleaver_seed=5, rate=0.9))
    c = build_code(TurboConfig(interleaver_seed=6))
    np.testing.assert_array_equal(a.interleaver, b.interleaver)
    assert not np.array_equal(a.interleaver, c.interleaver)
    np.testing.assert_array_equal(np.sort(a.interleaver), np.arange(4096))
    np.testing.assert_array_equal(a.interleaver[a.deinterleaver], np.arange(4096))


@pytest.mark.parametrize("terminated", [True, False])
def test_component_decoder_matches_exhaustive_map(terminated):
    rng = np.random.default_rng(4)
    nxt, par = RSC_37_23.trellis
    for n in (6, 9, 12):
        lsys = rng.normal(0.5, 2.0, n)
        lpar = rng.normal(0.5, 2.0, n)
        lpar[rng.random(n) < 0.3] = 0.0
        la = rng.normal(0, 1.0, n)
        app_u, app_p = log_map(lsys, lpar, la, nxt, par, terminated)
        ref_u, ref_p = exhaustive_component_map(lsys, lpar, la, RSC_37_23, terminated)
        np.testing.assert_allclose(app_u, ref_u, atol=1e-9)
        np.testing.assert_allclose(app_p, ref_p, atol=1e-9)


@pytest.mark.parametrize("rate", [0.6, 0.9])
def test_noiseless_round_trip(rate):
    cfg = TurboConfig(rate=rate)
    rng = np.random.default_rng(1)
    for _ in range(10):
        info = rng.integers(0, 2, 4096)
        coded = turbo_encode(info, cfg)
        _, llr, hard = turbo_decode(20.0 * (1 - 2.0 * coded), cfg)
        np.testing.assert_array_equal(hard, info)
        assert np.all(np.abs(llr) > 0)


def test_decoder_corrects_awgn_errors():
    cfg = TurboConfig(rate=0.6, iterations=8)
    code = build_code(cfg)
    rng = np.random.default_rng(2)
    sigma = 0.7
    total_raw = total_dec = 0
    for _ in range(3):
        info = rng.integers(0, 2, 4096)
        s = 1 - 2.0 * code.encode(info)
        y = s + rng.normal(0, sigma, s.size)
        llr = 2 * y / sigma**2
        total_raw += np.sum((llr < 0) != (s < 0))
        _, _, hard = code.decode(llr)
        total_dec += np.sum(hard != info)
    assert total_raw > 300
    assert total_dec == 0


def test_extrinsic_excludes_channel_input():
    # an erased channel input still gets extrinsic information from the code
    cfg = TurboConfig(rate=0.6)
    code = build_code(cfg)
    info = np.random.default_rng(3).integers(0, 2, 4096)
    llr = 8.0 * (1 - 2.0 * code.encode(info))
    llr[:50] = 0.0
    ext, _, hard = code.decode(llr)
    coded = code.encode(info)
    np.testing.assert_array_equal(hard, info)
    assert np.all(np.sign(ext[:50]) == 1 - 2.0 * coded[:50])


def test_decode_rejects_wrong_length():
    with pytest.raises(ValueError):
        build_code(TurboConfig()).decode(np.zeros(10))
    with pytest.raises(ValueError):
        build_code(TurboConfig()).encode(np.zeros(10))


def test_config_validation():
    with pytest.raises(ValueError):
        TurboConfig(rate=1.0)
    with pytest.raises(ValueError):
        TurboConfig(iterations=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.6, 0.9]))
def test_encoder_is_linear(seed, rate):
    cfg = TurboConfig(rate=rate, block_length=256)
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, (2, 256))
    ca, cb = turbo_encode(a, cfg), turbo_encode(b, cfg)
    # linear code except for the encoder 1 tail, which is also linear in the state
    np.testing.assert_array_equal(turbo_encode(a ^ b, cfg), ca ^ cb)
