"""Canonical-embedding encode/decode between slot vectors and Z_Q[X]/(X^N + 1).

Two transform paths share one convention:

* the float path (``Codec.encode`` / ``Codec.decode``) uses numpy's FFT and is
  accurate to double precision, which is plenty for plaintexts of the usual
  size;
* the exact path (``encode_exact`` / ``decode_exact``) runs the same FFT on
  Python integers in fixed point. Masked shares are as large as the modulus, so
  locally decoding them needs far more than 53 bits.

Slot ``j`` is the evaluation at ``zeta^(2j+1)`` with ``zeta = exp(i*pi/N)``.
"""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass

import mpmath
import numpy as np

from .errors import NotPowerOfTwo, Overflow


def _check_pow2(N: int) -> None:
    if N < 2 or N & (N - 1):
        raise NotPowerOfTwo(f"ring degree {N} is not a power of two >= 2")


def center(v: int, Q: int) -> int:
    """Centered representative of ``v mod Q`` in ``(-Q/2, Q/2]``."""
    v %= Q
    return v - Q if 2 * v > Q else v


def round_div(x: int, d: int) -> int:
    """``x / d`` rounded to nearest, ties to even (``d > 0``)."""
    q, r = divmod(x, d)
    if 2 * r > d or (2 * r == d and q % 2 == 1):
        q += 1
    return q


@dataclass(frozen=True, eq=False)
class RingElem:
    """Polynomial with coefficients in ``[0, modulus)``."""

    coeffs: np.ndarray  # object array of Python ints
    modulus: int

    def __post_init__(self) -> None:
        _check_pow2(len(self.coeffs))

    @classmethod
    def from_ints(cls, values, modulus: int) -> "RingElem":
        arr = np.array([int(v) % modulus for v in values], dtype=object)
        return cls(arr, modulus)

    @classmethod
    def zero(cls, N: int, modulus: int) -> "RingElem":
        return cls(np.array([0] * N, dtype=object), modulus)

    @property
    def N(self) -> int:
        return len(self.coeffs)

    def _check(self, other: "RingElem") -> None:
        if other.modulus != self.modulus or other.N != self.N:
            raise ValueError("ring elements live in different rings")

    def __add__(self, other: "RingElem") -> "RingElem":
        self._check(other)
        return RingElem((self.coeffs + other.coeffs) % self.modulus, self.modulus)

    def __sub__(self, other: "RingElem") -> "RingElem":
        self._check(other)
        return RingElem((self.coeffs - other.coeffs) % self.modulus, self.modulus)

    def __neg__(self) -> "RingElem":
        return RingElem((-self.coeffs) % self.modulus, self.modulus)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RingElem):
            return NotImplemented
        return self.modulus == other.modulus and list(self.coeffs) == list(other.coeffs)

    def centered(self) -> list[int]:
        return [center(int(c), self.modulus) for c in self.coeffs]


def uniform_ring(Q: int, seed: int, N: int) -> RingElem:
    """Element with i.i.d. uniform coefficients in ``[0, Q)``."""
    _check_pow2(N)
    gen = random.Random(seed)
    return RingElem(np.array([gen.randrange(Q) for _ in range(N)], dtype=object), Q)


# ---------------------------------------------------------------------------
# float path


class Codec:
    """Encoder for ``n`` complex slots in a ring of degree ``N = 2n``."""

    def __init__(self, n: int, delta: float | None = None) -> None:
        _check_pow2(2 * n)
        self.n = n
        self.N = 2 * n
        self.delta = delta
        k = np.arange(self.N)
        self._zeta = np.exp(1j * np.pi * k / self.N)

    def _delta(self, delta: float | None) -> float:
        d = self.delta if delta is None else delta
        if d is None or d <= 0:
            raise ValueError("a positive scale is required")
        return d

    def encode_coeffs(self, z: np.ndarray, delta: float | None = None) -> np.ndarray:
        """Rounded integer coefficients (object array) of ``Encode(z, delta)``."""
        d = self._delta(delta)
        z = np.asarray(z, dtype=np.complex128)
        if z.shape != (self.n,):
            raise ValueError(f"expected {self.n} slots, got {z.shape}")
        Z = np.empty(self.N, dtype=np.complex128)
        Z[: self.n] = z
        Z[self.n :] = np.conj(z[::-1])
        a = np.fft.fft(Z) / self.N
        c = np.rint((a * np.conj(self._zeta)).real * d)
        return np.array([int(v) for v in c], dtype=object)

    def encode(self, z: np.ndarray, Q: int, delta: float | None = None) -> RingElem:
        d = self._delta(delta)
        z = np.asarray(z, dtype=np.complex128)
        bound = d * float(np.max(np.abs(z))) if len(z) else 0.0
        if bound >= Q / 2:
            raise Overflow(f"delta*|z| = {bound:.3e} reaches Q/2")
        return RingElem(self.encode_coeffs(z, d) % Q, Q)

    def decode_coeffs(self, coeffs, delta: float | None = None) -> np.ndarray:
        """Slots of an integer (already centered) coefficient vector."""
        d = self._delta(delta)
        c = np.array([float(v) for v in coeffs], dtype=np.float64)
        Z = self.N * np.fft.ifft(c * self._zeta)
        return Z[: self.n] / d

    def decode(self, p: RingElem, delta: float | None = None) -> np.ndarray:
        if p.N != self.N:
            raise ValueError(f"ring degree {p.N} != {self.N}")
        return self.decode_coeffs(p.centered(), delta)


# ---------------------------------------------------------------------------
# exact path


@functools.lru_cache(maxsize=16)
def _roots(N: int, P: int) -> tuple[np.ndarray, np.ndarray]:
    """``round(2^P * cos(pi k/N))`` and the sine analogue for ``k < 2N``."""
    with mpmath.workprec(P + 32):
        scale = mpmath.mpf(2) ** P
        cos, sin = [], []
        for k in range(2 * N):
            t = mpmath.pi * k / N
            cos.append(int(mpmath.nint(mpmath.cos(t) * scale)))
            sin.append(int(mpmath.nint(mpmath.sin(t) * scale)))
    return np.array(cos, dtype=object), np.array(sin, dtype=object)


def _bit_reverse(N: int) -> np.ndarray:
    bits = N.bit_length() - 1
    idx = np.arange(N)
    rev = np.zeros(N, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_fixed(re: np.ndarray, im: np.ndarray, sign: int, P: int) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized DFT ``X_j = sum_k x_k exp(sign*2*pi*i*jk/N)`` in fixed point."""
    N = len(re)
    cos, sin = _roots(N, P)
    rev = _bit_reverse(N)
    re, im = re[rev].copy(), im[rev].copy()
    half_ulp = 1 << (P - 1)
    size = 2
    while size <= N:
        h = size // 2
        idx = (2 * sign * np.arange(h) * (N // size)) % (2 * N)
        wr, wi = cos[idx], sin[idx]
        R = re.reshape(-1, size)
        I = im.reshape(-1, size)
        ur, ui = R[:, :h].copy(), I[:, :h].copy()
        vr, vi = R[:, h:], I[:, h:]
        tr = (vr * wr - vi * wi + half_ulp) >> P
        ti = (vr * wi + vi * wr + half_ulp) >> P
        R[:, :h] = ur + tr
        I[:, :h] = ui + ti
        R[:, h:] = ur - tr
        I[:, h:] = ui - ti
        re, im = R.reshape(-1), I.reshape(-1)
        size *= 2
    return re, im


def _bits(values) -> int:
    return max((abs(int(v)).bit_length() for v in values), default=0)


def decode_exact(coeffs, delta: int, n: int, guard: int = 48) -> tuple[list[int], list[int]]:
    """Slots of an integer coefficient vector divided by ``delta``, rounded.

    Coefficients may be arbitrarily large; the transform runs at a working
    precision sized to the input so the rounded result is exact except when a
    slot lies within about ``2^-guard`` of a rounding boundary.
    """
    N = 2 * n
    if len(coeffs) != N:
        raise ValueError(f"expected {N} coefficients")
    P = _bits(coeffs) + N.bit_length() + guard
    cos, sin = _roots(N, P)
    c = np.array([int(v) for v in coeffs], dtype=object)
    re, im = _fft_fixed(c * cos[:N], c * sin[:N], +1, P)
    D = int(delta) << P
    return [round_div(int(v), D) for v in re[:n]], [round_div(int(v), D) for v in im[:n]]


def encode_exact(z_re, z_im, delta: int, guard: int = 48) -> list[int]:
    """Rounded coefficients of ``Encode(z_re + i z_im, delta)`` for integer slots."""
    n = len(z_re)
    N = 2 * n
    _check_pow2(N)
    P = max(_bits(z_re), _bits(z_im)) + N.bit_length() + guard
    zr = [int(v) for v in z_re]
    zi = [int(v) for v in z_im]
    re = np.array(zr + zr[::-1], dtype=object) << P
    im = np.array(zi + [-v for v in zi[::-1]], dtype=object) << P
    cos, sin = _roots(N, P)
    ar, ai = _fft_fixed(re, im, -1, P)
    c = ar * cos[:N] + ai * sin[:N]
    D = N << (2 * P)
    d = int(delta)
    return [round_div(int(v) * d, D) for v in c]
