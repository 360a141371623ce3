import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridlab import ring_codec as rc
from hybridlab.errors import NotPowerOfTwo, Overflow


def evaluate(coeffs, n):
    """Slot j = p(zeta^(2j+1)), evaluated directly."""
    N = 2 * n
    zeta = np.exp(1j * np.pi / N)
    c = np.array([float(v) for v in coeffs])
    return np.array([np.polyval(c[::-1], zeta ** (2 * j + 1)) for j in range(n)])


def negacyclic(a, b):
    N = len(a)
    out = [0] * N
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            k = i + j
            if k < N:
                out[k] += x * y
            else:
                out[k - N] -= x * y
    return out


def test_single_slot_encoding_by_hand():
    # N = 2: slot 0 is p(i) = c0 + i c1
    assert list(rc.Codec(1, 1.0).encode_coeffs(np.array([3 + 5j]))) == [3, 5]


@given(st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**31))
def test_encoding_matches_direct_evaluation(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    delta = 2.0**30
    c = rc.Codec(n, delta).encode_coeffs(z)
    np.testing.assert_allclose(evaluate(c, n) / delta, z, atol=n * 2.0**-29)


@given(st.sampled_from([4, 8, 16]), st.integers(0, 2**31))
def test_slot_product_is_negacyclic_product(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    b = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    codec = rc.Codec(n)
    d = 2**20
    ca = [int(v) for v in codec.encode_coeffs(a, d)]
    cb = [int(v) for v in codec.encode_coeffs(b, d)]
    got = codec.decode_coeffs(negacyclic(ca, cb), float(d) ** 2)
    np.testing.assert_allclose(got, a * b, atol=1e-4)


@given(st.integers(0, 2**31))
def test_encode_decode_roundtrip_mod_Q(seed):
    rng = np.random.default_rng(seed)
    n = 64
    z = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    Q = (1 << 100) + 277
    codec = rc.Codec(n, 2.0**40)
    np.testing.assert_allclose(codec.decode(codec.encode(z, Q)), z, atol=1e-9)


def test_encode_overflow_and_degree_checks():
    codec = rc.Codec(4, 2.0**40)
    with pytest.raises(Overflow):
        codec.encode(np.full(4, 1.0), 2**40)
    with pytest.raises(NotPowerOfTwo):
        rc.Codec(3)
    with pytest.raises(ValueError):
        rc.Codec(4).encode_coeffs(np.zeros(4))


@given(
    st.sampled_from([1, 2, 4, 8, 32]),
    st.integers(0, 2**31),
    st.integers(10, 200),
)
def test_exact_encode_decode_roundtrip_on_integers(n, seed, mag_bits):
    rng = np.random.default_rng(seed)
    zr = [int(v) for v in rng.integers(-1000, 1000, n)]
    zi = [int(v) for v in rng.integers(-1000, 1000, n)]
    zr[0] <<= mag_bits
    delta = 1 << 24
    coeffs = rc.encode_exact(zr, zi, delta)
    assert rc.decode_exact(coeffs, delta, n) == (zr, zi)


@given(st.integers(0, 2**31))
def test_exact_decode_agrees_with_float_decode(seed):
    rng = np.random.default_rng(seed)
    n = 16
    z = np.rint(rng.uniform(-100, 100, n)) + 1j * np.rint(rng.uniform(-100, 100, n))
    delta = 1 << 30
    coeffs = rc.Codec(n, float(delta)).encode_coeffs(z)
    re, im = rc.decode_exact(coeffs, delta, n)
    np.testing.assert_array_equal(re, z.real.astype(int))
    np.testing.assert_array_equal(im, z.imag.astype(int))


def test_exact_decode_survives_huge_coefficients():
    # adding Q * (random integer polynomial) shifts slots by Q * (its slots); pick a constant
    n = 8
    delta = 1 << 40
    Q = (1 << 300) + 1
    coeffs = rc.encode_exact([5] * n, [-3] * n, delta)
    shifted = [coeffs[0] + Q * delta] + coeffs[1:]
    re, im = rc.decode_exact(shifted, delta, n)
    assert re == [5 + Q] * n and im == [-3] * n


def test_center_and_round_div():
    assert rc.center(16, 17) == -1
    assert rc.center(8, 17) == 8
    assert rc.center(9, 17) == -8
    assert rc.round_div(5, 2) == 2  # ties to even
    assert rc.round_div(7, 2) == 4
    assert rc.round_div(-5, 2) == -2
    assert rc.round_div(11, 4) == 3


def test_uniform_ring_is_seeded_and_in_range():
    a, b = rc.uniform_ring(97, 1, 16), rc.uniform_ring(97, 1, 16)
    assert a == b
    assert all(0 <= int(v) < 97 for v in a.coeffs)
    assert rc.uniform_ring(97, 2, 16) != a


def test_ring_arithmetic():
    a = rc.RingElem.from_ints([1, 2, 3, 4], 5)
    b = rc.RingElem.from_ints([4, 4, 4, 4], 5)
    assert (a + b).centered() == [0, 1, 2, -2]
    assert (a - a) == rc.RingElem.zero(4, 5)
    assert (-a).centered() == [-1, -2, 2, 1]
