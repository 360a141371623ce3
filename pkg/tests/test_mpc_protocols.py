from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridlab import he_kernels as hk
from hybridlab import mpc_protocols as mp
from hybridlab.errors import MissingCandidates
from hybridlab.mpc_engine import Engine, Ring

F = 13
COEFFS = hk.fit_gelu_coeffs()


def q(x):
    return np.rint(np.asarray(x) * 2**F) / 2**F


# the protocol compares against the threshold on the fixed-point grid
GRID_COEFFS = replace(COEFFS, threshold=float(q(COEFFS.threshold)))


def eng(seed=0):
    return Engine(Ring(43, F), seed=seed)


def test_mbmax_hand_value():
    # (1 + 1)^5 / 32 = 1
    e = eng()
    out = mp.mbmax(e, e.share(np.array([1.0])), mp.MBMaxParams(c=1.0, R_d=32.0))
    assert abs(e.reconstruct(out)[0] - 1.0) < 1e-3


@given(st.lists(st.floats(-1.9, 2.0, allow_nan=False), min_size=1, max_size=32), st.integers(0, 2**31))
def test_mbmax_matches_plaintext_in_three_rounds(xs, seed):
    e = eng(seed)
    p = mp.MBMaxParams(c=2.0, R_d=8 * 32.0)
    x = q(xs)
    out = e.reconstruct(mp.mbmax(e, e.share(x), p))
    ref = p.apply(x)
    # error grows with the derivative 5 (x + c)^4 / R_d times a few ulps
    assert np.max(np.abs(out - ref)) <= 8 * 5 * 4**4 / p.R_d * 2.0**-F + 1e-9
    assert e.transcript.rounds == 3


def test_mbmax_output_frac_bits_and_cap():
    e = eng()
    x = e.share(np.array([0.5]))
    assert mp.mbmax(e, x, mp.MBMaxParams(2.0, 256.0))[0].frac_bits == 3 * F
    capped = mp.mbmax(e, x, mp.MBMaxParams(2.0, 256.0), max_frac_bits=30)
    assert capped[0].frac_bits == 30
    assert abs(e.reconstruct(capped)[0] - 2.5**5 / 256) < 1e-2


def test_mbmax_params_validation():
    with pytest.raises(ValueError):
        mp.MBMaxParams(p=3)
    with pytest.raises(ValueError):
        mp.MBMaxParams(R_d=0)


@given(st.integers(1, 6), st.integers(2, 24), st.integers(0, 2**31))
def test_mbln_is_local_and_matches_plaintext(rows, d, seed):
    rng = np.random.default_rng(seed)
    e = eng(seed)
    X = q(rng.uniform(-4, 4, (rows, d)))
    params = mp.MBLNParams(rng.uniform(0.8, 1.2, d), rng.uniform(-0.1, 0.1, d))
    out = e.reconstruct(mp.mbln(e, e.share(X), params))
    assert np.max(np.abs(out - params.apply(X))) < 1e-3
    assert e.transcript.rounds == 0


def test_mbln_constant_row_gives_beta():
    e = eng()
    params = mp.MBLNParams(np.ones(4), np.array([0.1, -0.2, 0.3, 0.0]))
    out = e.reconstruct(mp.mbln(e, e.share(np.full((1, 4), 3.0)), params))
    np.testing.assert_allclose(out[0], params.beta, atol=2.0**-F)


def test_mbln_gamma_tilde_folds_scales():
    p = mp.MBLNParams(np.array([2.0]), np.array([0.0]), l=4.0, R_d=0.5)
    np.testing.assert_allclose(p.gamma_tilde, [1.0])


gelu_inputs = st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=48)


@given(gelu_inputs, st.integers(0, 2**31))
def test_gelu_preeval_selects_in_four_rounds(xs, seed):
    e = eng(seed)
    x = q(xs)
    f0, f1 = e.share(COEFFS.f0(x)), e.share(COEFFS.f1(x))
    out = e.reconstruct(mp.gelu_protocol(e, "preeval", e.share(x), COEFFS, f0, f1))
    np.testing.assert_allclose(out, GRID_COEFFS.approx(x), atol=4 * 2.0**-F)
    assert e.transcript.rounds == 4


@given(gelu_inputs, st.integers(0, 2**31))
def test_gelu_mpc_poly_in_seven_rounds(xs, seed):
    e = eng(seed)
    x = q(xs)
    out = e.reconstruct(mp.gelu_protocol(e, "mpc_poly", e.share(x), COEFFS))
    np.testing.assert_allclose(out, GRID_COEFFS.approx(x), atol=2e-3)
    rec = e.transcript.to_record()
    assert rec["gelu_candidates"]["rounds"] == 3
    assert rec["gelu_select"]["rounds"] == 4
    assert rec["total"]["rounds"] == 7


def test_gelu_preeval_needs_candidates():
    e = eng()
    with pytest.raises(MissingCandidates):
        mp.gelu_protocol(e, "preeval", e.share(np.zeros(2)), COEFFS)
    with pytest.raises(ValueError):
        mp.gelu_protocol(e, "other", e.share(np.zeros(2)), COEFFS)


def test_zone_indicators_partition_the_line():
    e = eng()
    x = np.array([-3.0, -2.7, -1.0, 0.0, 1.0, 2.7, 5.0])
    z0, z1, z2, neg = (e.reconstruct_int(z) for z in mp.zone_indicators(e, e.share(x), 2.7))
    np.testing.assert_array_equal(z0, [0, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(z1, [0, 0, 0, 1, 1, 0, 0])
    np.testing.assert_array_equal(z2, [0, 0, 0, 0, 0, 1, 1])
    np.testing.assert_array_equal(neg, [1, 0, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(z0 + z1 + z2 + neg, 1)
