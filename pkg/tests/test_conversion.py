import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridlab import conversion as cv
from hybridlab import ring_codec as rc
from hybridlab import slot_engine as se
from hybridlab.errors import ConfigViolation, DomainMismatch, Overflow
from hybridlab.mpc_engine import Engine, Ring

CFG = cv.default_config(4)
GRID = 2.0**CFG.F


def on_grid(rng, n, mag=8.0):
    return np.rint(rng.uniform(-mag, mag, n) * GRID) / GRID


def fresh_ct(z, led, level=4):
    return se.encrypt(z, led, level=level, scale=float(CFG.delta))


def test_ct_bytes_and_pair_payload():
    assert cv.ct_bytes(65536, 5) == 5 * 2**20
    real = cv.pair_payload("real", 2, 65536, 5)
    cplx = cv.pair_payload("complex", 2, 65536, 5)
    assert real.total_bytes == 20971520
    assert real.total_bytes == 2 * cplx.total_bytes
    trimmed = cv.pair_payload("complex", 2, 65536, 5, trim_limbs=2)
    assert trimmed.bytes_c2m == cv.ct_bytes(65536, 2)
    assert trimmed.bytes_m2c == cv.ct_bytes(65536, 5)
    with pytest.raises(ValueError):
        cv.pair_payload("other", 2, 8, 1)


@given(st.sampled_from(["real", "complex"]), st.integers(1, 20), st.sampled_from([1024, 32768]), st.integers(1, 6))
def test_complex_mode_halves_ciphertexts(mode, k, N, limbs):
    rep = cv.pair_payload(mode, k, N, limbs)
    assert rep.cts_per_direction == (math.ceil(k / 2) if mode == "complex" else k)
    assert rep.total_bytes == 2 * rep.cts_per_direction * cv.ct_bytes(N, limbs)


def test_rule_chosen_level_for_a_60_plus_40k_chain():
    assert CFG.L_conv == 1
    Q = CFG.Q_conv
    assert Q.bit_length() - 1 >= CFG.ell + CFG.sigma + 1
    assert Q // 2 > CFG.coeff_bound
    assert not CFG.level_ok(0)


def test_config_rejects_short_chains_and_bad_levels():
    chain = se.ModulusChain.generate(1, 20, base_bits=30)
    with pytest.raises(ConfigViolation):
        cv.ConversionConfig(chain, delta=2**20)
    with pytest.raises(ConfigViolation):
        cv.ConversionConfig(CFG.chain, L_conv=0)
    with pytest.raises(ConfigViolation):
        cv.ConversionConfig(CFG.chain, delta=3 * 2**38)


def test_field_to_ring_toy_case():
    Q, ell = 17, 8
    s0 = 5
    s1 = (-3 - s0) % Q
    out0, out1 = cv.field2ring([s0], [s1], Q, ell, exact=True)
    assert (out0[0] + out1[0]) % 256 == 253


def test_ring_to_field_toy_case():
    u0 = 5
    u1 = (-3 - u0) % 256
    out0, out1 = cv.ring2field([u0], [u1], 8, 17, sigma=2, exact=True)
    assert (out0[0] + out1[0]) % 17 == 14


@given(st.integers(-(2**20), 2**20), st.integers(0, 2**64), st.sampled_from([2**61 - 1, (1 << 89) - 1]))
def test_exact_extension_is_exact(x, r, M):
    a0 = r % M
    a1 = (x - a0) % M
    (s0,), (s1,) = cv.extend_shares([a0], [a1], M, exact=True)
    assert s0 + s1 == x


def failure_rate(convert, trials, rng):
    fails = sum(0 if convert(rng) else 1 for _ in range(trials))
    return fails / trials


@pytest.mark.parametrize("sigma", [4, 8])
def test_local_field_to_ring_failure_rate(sigma):
    ell = 8
    Q = next(q for q in range(2 ** (ell + sigma) + 1, 2 ** (ell + sigma + 1), 2) if all(q % p for p in range(3, 200, 2)))
    rng = np.random.default_rng(sigma)
    trials = 20000

    def once(rng):
        x = int(rng.integers(-(2 ** (ell - 1)) + 1, 2 ** (ell - 1)))
        s0 = int(rng.integers(0, Q))
        out0, out1 = cv.field2ring([s0], [(x - s0) % Q], Q, ell, exact=False)
        return (out0[0] + out1[0]) % 2**ell == x % 2**ell

    rate = failure_rate(once, trials, rng)
    bound = 2.0**-sigma
    assert rate <= bound + 4 * math.sqrt(bound / trials)


@pytest.mark.parametrize("sigma", [4, 8])
def test_local_ring_to_field_failure_rate(sigma):
    ell, Q = 16, (1 << 61) - 1
    rng = np.random.default_rng(100 + sigma)
    trials = 20000
    lim = 2 ** (ell - sigma - 1)

    def once(rng):
        x = int(rng.integers(-lim + 1, lim))
        u0 = int(rng.integers(0, 2**ell))
        out0, out1 = cv.ring2field([u0], [(x - u0) % 2**ell], ell, Q, sigma=sigma, exact=False)
        return (out0[0] + out1[0]) % Q == x % Q

    rate = failure_rate(once, trials, rng)
    bound = 2.0**-sigma
    assert rate <= bound + 4 * math.sqrt(bound / trials)


@given(st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**31))
def test_c2m_is_exact_on_the_grid(n, seed):
    rng = np.random.default_rng(seed)
    x, y = on_grid(rng, n), on_grid(rng, n)
    eng = Engine(Ring(CFG.ell, CFG.F), seed=seed)
    led = se.OpLedger()
    xs, ys = cv.c2m_complex(cv.trim(fresh_ct(x + 1j * y, led), CFG), CFG, eng, seed=seed)
    np.testing.assert_array_equal(eng.reconstruct(xs), x)
    np.testing.assert_array_equal(eng.reconstruct(ys), y)
    assert eng.transcript.rounds == 0


@given(st.sampled_from([2, 4, 8]), st.integers(0, 2**31))
def test_m2c_after_c2m_is_identity(n, seed):
    rng = np.random.default_rng(seed)
    x, y = on_grid(rng, n), on_grid(rng, n)
    eng = Engine(Ring(CFG.ell, CFG.F), seed=seed)
    led = se.OpLedger()
    log = cv.ConversionLog()
    xs, ys = cv.c2m_complex(cv.trim(fresh_ct(x + 1j * y, led), CFG), CFG, eng, seed=seed, log=log)
    back = cv.m2c_complex(xs, ys, CFG, eng, led, level=4, log=log)
    np.testing.assert_allclose(back.slots, x + 1j * y, atol=1e-9)
    assert back.level == 4 and back.scale == CFG.delta
    assert log.c2m_bytes == cv.ct_bytes(2 * n, CFG.L_conv + 1)
    assert log.m2c_bytes == cv.ct_bytes(2 * n, 5)


def test_m2c_absorbs_extra_fraction_bits():
    eng = Engine(Ring(CFG.ell, CFG.F))
    x = eng.mul_int(eng.share(np.array([0.75, -1.5])), 1 << 10, frac_bits=CFG.F + 10)
    y = eng.share(np.array([0.25, 2.0]))
    back = cv.m2c_complex(x, y, CFG, eng, se.OpLedger(), level=3)
    np.testing.assert_allclose(back.slots, [0.75 + 0.25j, -1.5 + 2j], atol=1e-9)


def test_c2m_preconditions():
    eng = Engine(Ring(CFG.ell, CFG.F))
    led = se.OpLedger()
    with pytest.raises(ConfigViolation):
        cv.c2m_complex(fresh_ct(np.zeros(4), led, level=0), CFG, eng, seed=0)
    with pytest.raises(DomainMismatch):
        cv.c2m_complex(se.encrypt(np.zeros(4), led, 2, float(CFG.delta), owner=se.PUBLIC), CFG, eng, seed=0)
    with pytest.raises(Overflow):
        cv.c2m_complex(fresh_ct(np.full(4, 1e3), led), CFG, eng, seed=0)
    with pytest.raises(ConfigViolation):
        cv.c2m_complex(fresh_ct(np.zeros(4), led), CFG, Engine(Ring(40, 12)), seed=0)


def test_trim_only_drops_limbs():
    led = se.OpLedger()
    ct = fresh_ct(np.array([1.5, 2.5]), led)
    t = cv.trim(ct, CFG)
    assert t.level == CFG.L_conv
    np.testing.assert_array_equal(t.slots, ct.slots)
    with pytest.raises(ConfigViolation):
        cv.trim(fresh_ct(np.zeros(2), led, level=0), CFG)


def test_mask_hides_the_plaintext():
    # the view for two plaintexts under one mask differs by exactly their difference
    n, Q = 16, CFG.Q_conv
    codec = rc.Codec(n, float(CFG.delta))
    t1 = codec.encode(np.full(n, 1.0), Q)
    t2 = codec.encode(np.full(n, -3.0), Q)
    v1, v2 = cv.mask_view(t1, Q, 9), cv.mask_view(t2, Q, 9)
    assert (v1 - v2) == (t1 - t2)
    top = [int(c) * 2 // Q for c in cv.mask_view(t1, Q, 10).coeffs]
    assert 0 < sum(top) < 2 * n


def test_codec_roundtrip_at_boundary_scale():
    rng = np.random.default_rng(0)
    n = 2**14
    z = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    codec = rc.Codec(n, 2.0**40)
    err = np.max(np.abs(codec.decode(codec.encode(z, CFG.chain.partial_products[-1])) - z))
    assert err <= 1e-4
