"""Simulated two-party arithmetic over Z_{2^ell} with a trusted dealer.

Both parties live in one process. Shares are ``uint64`` arrays; since ``2^ell``
divides ``2^64`` the native wraparound is exact modulo ``2^ell``. Every
opening goes through :meth:`Engine._flush`, which meters one round and the
bytes each party sends.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBit, LengthMismatch, Overflow

P0, P1 = 0, 1
U64 = np.uint64


@dataclass(frozen=True)
class Ring:
    ell: int = 43
    F: int = 13

    def __post_init__(self) -> None:
        if not 2 <= self.ell <= 63:
            raise ValueError("ell must lie in [2, 63]")
        if not 0 <= self.F < self.ell - 2:
            raise ValueError("F must leave headroom below ell")

    @property
    def mask(self) -> np.uint64:
        return U64((1 << self.ell) - 1)

    @property
    def elem_bytes(self) -> int:
        return math.ceil(self.ell / 8)

    def reduce(self, v) -> np.ndarray:
        return np.asarray(v, dtype=U64) & self.mask

    def from_signed(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.int64).astype(U64) & self.mask

    def to_signed(self, v: np.ndarray) -> np.ndarray:
        """Centered representative in ``[-2^(ell-1), 2^(ell-1))``."""
        v = np.asarray(v, dtype=U64) & self.mask
        s = v.astype(np.int64)
        return np.where(s >= (1 << (self.ell - 1)), s - (1 << self.ell), s)


@dataclass(frozen=True, eq=False)
class FixedShare:
    """One party's additive share of a fixed-point tensor."""

    party: int
    values: np.ndarray
    frac_bits: int
    ring: Ring

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


Pair = tuple[FixedShare, FixedShare]


def _pair(ring: Ring, v0: np.ndarray, v1: np.ndarray, F: int) -> Pair:
    return FixedShare(P0, ring.reduce(v0), F, ring), FixedShare(P1, ring.reduce(v1), F, ring)


# ---------------------------------------------------------------------------
# transcript


@dataclass
class ProtocolRecord:
    rounds: int = 0
    bytes_P0: int = 0
    bytes_P1: int = 0

    def to_record(self) -> dict[str, int]:
        return {"rounds": self.rounds, "bytes_P0": self.bytes_P0, "bytes_P1": self.bytes_P1}


@dataclass
class Transcript:
    """Round and byte meter with a per-protocol breakdown."""

    rounds: int = 0
    bytes: list[int] = field(default_factory=lambda: [0, 0])
    breakdown: dict[str, ProtocolRecord] = field(default_factory=dict)
    _stack: list[str] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return self.bytes[0] + self.bytes[1]

    @contextlib.contextmanager
    def protocol(self, name: str):
        self._stack.append(name)
        try:
            yield self.breakdown.setdefault(name, ProtocolRecord())
        finally:
            self._stack.pop()

    def flush(self, sent_P0: int, sent_P1: int) -> None:
        """One synchronous exchange where each party sends the given byte count."""
        self.rounds += 1
        self.bytes[0] += sent_P0
        self.bytes[1] += sent_P1
        for name in set(self._stack):
            rec = self.breakdown[name]
            rec.rounds += 1
            rec.bytes_P0 += sent_P0
            rec.bytes_P1 += sent_P1

    def to_record(self) -> dict[str, dict[str, int]]:
        out = {k: v.to_record() for k, v in sorted(self.breakdown.items())}
        out["total"] = {"rounds": self.rounds, "bytes_P0": self.bytes[0], "bytes_P1": self.bytes[1]}
        return out


# ---------------------------------------------------------------------------
# dealer


class Dealer:
    """Seeded source of correlated randomness. Every output reconstructs exactly."""

    def __init__(self, ring: Ring, seed: int = 0) -> None:
        self.ring = ring
        self.rng = np.random.default_rng(seed)

    def uniform(self, shape) -> np.ndarray:
        return self.rng.integers(0, 1 << 63, size=shape, dtype=np.int64).astype(U64) & self.ring.mask

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s0 = self.uniform(np.shape(v))
        return s0, self.ring.reduce(np.asarray(v, dtype=U64) - s0)

    def triple(self, shape) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        """Shares of ``a``, ``b`` and ``c = a*b``."""
        a, b = self.uniform(shape), self.uniform(shape)
        c = self.ring.reduce(a * b)
        return self.split(a), self.split(b), self.split(c)

    def trunc_pair(self, shape, shift: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Shares of ``r``, its top bit, and its low ``ell-1`` bits shifted right."""
        ring = self.ring
        r = self.uniform(shape)
        hi = U64(ring.ell - 1)
        low = r & U64((1 << (ring.ell - 1)) - 1)
        return {"r": self.split(r), "msb": self.split(r >> hi), "low_shift": self.split(low >> U64(shift))}

    def cmp_key(self, shape) -> dict[str, object]:
        """Mask ``r`` with shared top bit plus a comparison key on its low bits.

        The key stands in for a distributed comparison function: evaluated at a
        public point ``c`` it yields shares of ``1[c < r_low]``.
        """
        ring = self.ring
        r = self.uniform(shape)
        low = r & U64((1 << (ring.ell - 1)) - 1)
        return {"r": self.split(r), "msb": self.split(r >> U64(ring.ell - 1)), "low": low}

    def eval_cmp_key(self, key: dict[str, object], c_low: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.split((c_low < key["low"]).astype(U64))


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Two-party online phase. ``debug`` reconstructs intermediates to check preconditions."""

    def __init__(self, ring: Ring | None = None, seed: int = 0, debug: bool = True) -> None:
        self.ring = ring or Ring()
        self.dealer = Dealer(self.ring, seed)
        self.transcript = Transcript()
        self.debug = debug

    # -- sharing ----------------------------------------------------------

    def share_int(self, v, F: int | None = None) -> Pair:
        """Share integers that are already at scale ``2^F``."""
        F = self.ring.F if F is None else F
        v = np.asarray(v, dtype=np.int64)
        lim = 1 << (self.ring.ell - 1)
        if np.any(v >= lim) or np.any(v < -lim):
            raise Overflow("value outside the signed ring range")
        s0, s1 = self.dealer.split(self.ring.from_signed(v))
        return _pair(self.ring, s0, s1, F)

    def share(self, x, F: int | None = None) -> Pair:
        F = self.ring.F if F is None else F
        x = np.asarray(x, dtype=np.float64)
        scaled = np.rint(x * 2.0**F)
        if np.any(np.abs(scaled) >= 2.0 ** (self.ring.ell - 1)):
            raise Overflow("|x * 2^F| must stay below 2^(ell-1)")
        return self.share_int(scaled.astype(np.int64), F)

    def reconstruct_int(self, s: Pair) -> np.ndarray:
        a, b = s
        if a.values.shape != b.values.shape:
            raise LengthMismatch("share shapes differ")
        return self.ring.to_signed(a.values + b.values)

    def reconstruct(self, s: Pair) -> np.ndarray:
        return self.reconstruct_int(s).astype(np.float64) / 2.0 ** s[0].frac_bits

    # -- local linear algebra --------------------------------------------

    def add(self, a: Pair, b: Pair) -> Pair:
        _same_scale(a, b)
        return _pair(self.ring, a[0].values + b[0].values, a[1].values + b[1].values, a[0].frac_bits)

    def sub(self, a: Pair, b: Pair) -> Pair:
        _same_scale(a, b)
        return _pair(self.ring, a[0].values - b[0].values, a[1].values - b[1].values, a[0].frac_bits)

    def neg(self, a: Pair) -> Pair:
        return _pair(self.ring, -a[0].values, -a[1].values, a[0].frac_bits)

    def add_const(self, a: Pair, c) -> Pair:
        """Add a public real constant (P0 only)."""
        k = self.ring.from_signed(np.rint(np.asarray(c, dtype=np.float64) * 2.0 ** a[0].frac_bits).astype(np.int64))
        return _pair(self.ring, a[0].values + k, a[1].values, a[0].frac_bits)

    def add_int(self, a: Pair, k) -> Pair:
        k = self.ring.from_signed(k)
        return _pair(self.ring, a[0].values + k, a[1].values, a[0].frac_bits)

    def mul_int(self, a: Pair, k, frac_bits: int | None = None) -> Pair:
        """Multiply by a public integer; the scale label may be changed explicitly."""
        k = self.ring.from_signed(k)
        F = a[0].frac_bits if frac_bits is None else frac_bits
        return _pair(self.ring, a[0].values * k, a[1].values * k, F)

    def rowsum(self, X: Pair) -> Pair:
        return _pair(self.ring, X[0].values.sum(axis=-1), X[1].values.sum(axis=-1), X[0].frac_bits)

    def bcast(self, s: Pair, d: int) -> Pair:
        rep = lambda v: np.repeat(v[..., None], d, axis=-1)  # noqa: E731
        return _pair(self.ring, rep(s[0].values), rep(s[1].values), s[0].frac_bits)

    def concat(self, parts: list[Pair]) -> Pair:
        _same_scale(*parts)
        return _pair(
            self.ring,
            np.concatenate([p[0].values.ravel() for p in parts]),
            np.concatenate([p[1].values.ravel() for p in parts]),
            parts[0][0].frac_bits,
        )

    def split(self, s: Pair, shapes: list[tuple[int, ...]]) -> list[Pair]:
        out, at = [], 0
        for shp in shapes:
            k = int(np.prod(shp))
            out.append(
                _pair(self.ring, s[0].values[at : at + k].reshape(shp), s[1].values[at : at + k].reshape(shp), s[0].frac_bits)
            )
            at += k
        return out

    # -- interactive --------------------------------------------------------

    def _flush(self, elems_P0: int, elems_P1: int) -> None:
        eb = self.ring.elem_bytes
        self.transcript.flush(elems_P0 * eb, elems_P1 * eb)

    def _check_bound(self, z: np.ndarray, shift: int) -> None:
        if not self.debug:
            return
        lim = 1 << (self.ring.ell - 2)
        if np.any(np.abs(z) >= lim):
            raise Overflow("intermediate exceeds the truncation headroom")

    def _truncate_local(self, z0: np.ndarray, z1: np.ndarray, shift: int) -> tuple[np.ndarray, np.ndarray, int]:
        """Faithful truncation by ``shift`` bits; returns shares and opened element count.

        P0 offsets by ``2^(ell-2)`` so the opened value has a clear top bit. The
        low-bit borrow is not corrected, so the result is ``floor(z/2^shift)``
        or one above it: always a grid neighbour of the exact quotient.
        """
        ring = self.ring
        if shift == 0:
            return z0, z1, 0
        if self.debug:
            self._check_bound(ring.to_signed(z0 + z1), shift)
        pair = self.dealer.trunc_pair(z0.shape, shift)
        off = U64(1 << (ring.ell - 2))
        c = ring.reduce((z0 + off + pair["r"][0]) + (z1 + pair["r"][1]))
        hi = U64(ring.ell - 1)
        c_msb = c >> hi
        c_low = c & U64((1 << (ring.ell - 1)) - 1)
        top = U64(1 << (ring.ell - 1 - shift))
        # w = c_msb XOR r_msb, linear in the shared bit because c_msb is public
        w0 = c_msb + pair["msb"][0] * (U64(1) - U64(2) * c_msb)
        w1 = pair["msb"][1] * (U64(1) - U64(2) * c_msb)
        back = U64(1 << (ring.ell - 2 - shift))
        t0 = (c_low >> U64(shift)) - pair["low_shift"][0] + top * w0 - back
        t1 = -pair["low_shift"][1] + top * w1
        return ring.reduce(t0), ring.reduce(t1), c.size

    def batch(
        self,
        mults: list[tuple[Pair, Pair, int]] = (),
        scales: list[tuple[Pair, object, int, int]] = (),
    ) -> list[Pair]:
        """One round: Beaver products and public-constant scalings, each truncated.

        ``mults`` holds ``(a, b, shift)`` and ``scales`` holds ``(a, k, k_frac,
        shift)`` where the integer ``k`` encodes a constant at scale
        ``2^k_frac``. Result scales are ``F_a + F_b - shift`` and
        ``F_a + k_frac - shift``.
        Metered bytes cover the Beaver openings plus the openings of standalone
        truncations; the truncation of a product shares its round and is not
        metered separately.
        """
        ring = self.ring
        out: list[Pair] = []
        sent = 0
        for a, b, shift in mults:
            if a[0].shape != b[0].shape:
                raise LengthMismatch(f"{a[0].shape} != {b[0].shape}")
            (a0, a1), (b0, b1), (c0, c1) = self.dealer.triple(a[0].shape)
            alpha = ring.reduce((a[0].values - a0) + (a[1].values - a1))
            beta = ring.reduce((b[0].values - b0) + (b[1].values - b1))
            z0 = c0 + alpha * b0 + beta * a0 + alpha * beta
            z1 = c1 + alpha * b1 + beta * a1
            t0, t1, _ = self._truncate_local(ring.reduce(z0), ring.reduce(z1), shift)
            sent += 2 * a[0].values.size
            out.append(_pair(ring, t0, t1, a[0].frac_bits + b[0].frac_bits - shift))
        for a, k, k_frac, shift in scales:
            s = self.mul_int(a, k)
            t0, t1, opened = self._truncate_local(s[0].values, s[1].values, shift)
            sent += opened
            out.append(_pair(ring, t0, t1, a[0].frac_bits + k_frac - shift))
        if sent or mults or scales:
            self._flush(sent, sent)
        return out

    def mul_fixed(self, a: Pair, b: Pair) -> Pair:
        """Fixed-point product at scale ``2^F``; one round."""
        return self.batch(mults=[(a, b, b[0].frac_bits)])[0]

    def mul_public(self, a: Pair, c: float, extra_bits: int = 0) -> Pair:
        """Multiply by a public real; one truncation round."""
        F = self.ring.F + extra_bits
        k = np.rint(np.asarray(c, dtype=np.float64) * 2.0**F).astype(np.int64)
        return self.batch(scales=[(a, k, F, F)])[0]

    def cmp(self, x: Pair, taus) -> Pair:
        """Shares of ``1[x < tau]`` as integers (scale 1); two rounds for any batch.

        ``taus`` broadcasts against ``x``; strict inequality, so ``x == tau`` gives 0.
        Round one opens ``d + r`` with ``d = x - tau``; the comparison key then
        yields the borrow out of the low bits, and round two XORs it with the
        shared top bit of ``r``.
        """
        ring = self.ring
        taus = np.broadcast_to(np.asarray(taus, dtype=np.float64), x[0].shape)
        tau_int = np.rint(taus * 2.0 ** x[0].frac_bits).astype(np.int64)
        d = self.add_int(x, -tau_int)
        key = self.dealer.cmp_key(d[0].shape)
        c = ring.reduce((d[0].values + key["r"][0]) + (d[1].values + key["r"][1]))
        self._flush(c.size, c.size)
        c_msb = c >> U64(ring.ell - 1)
        c_low = c & U64((1 << (ring.ell - 1)) - 1)
        borrow = self.dealer.eval_cmp_key(key, c_low)
        # msb(d) = c_msb ^ r_msb ^ borrow; fold the public bit in linearly
        u = _pair(ring, key["msb"][0], key["msb"][1], 0)
        v = _pair(ring, borrow[0], borrow[1], 0)
        t = self.xor_many([(u, v)])[0]
        return _pair(ring, c_msb + t[0].values * (U64(1) - U64(2) * c_msb), t[1].values * (U64(1) - U64(2) * c_msb), 0)

    def _check_bits(self, b: Pair) -> None:
        if self.debug:
            v = self.reconstruct_int(b)
            if not np.all((v == 0) | (v == 1)):
                raise InvalidBit("shared bit reconstructs outside {0,1}")

    def xor_many(self, pairs: list[tuple[Pair, Pair]]) -> list[Pair]:
        """``a + b - 2ab`` for each pair of shared bits, all in one round."""
        for a, b in pairs:
            self._check_bits(a)
            self._check_bits(b)
        prods = self.batch(mults=[(a, b, 0) for a, b in pairs])
        return [
            _pair(
                self.ring,
                a[0].values + b[0].values - U64(2) * p[0].values,
                a[1].values + b[1].values - U64(2) * p[1].values,
                0,
            )
            for (a, b), p in zip(pairs, prods)
        ]

    def xor(self, a: Pair, b: Pair) -> Pair:
        return self.xor_many([(a, b)])[0]

    def mux_many(self, pairs: list[tuple[Pair, Pair]]) -> list[Pair]:
        """``b * u`` for shared bits ``b`` and fixed-point ``u``, all in one round."""
        for b, _ in pairs:
            self._check_bits(b)
        return self.batch(mults=[(u, b, 0) for b, u in pairs])

    def mux(self, u: Pair, b: Pair) -> Pair:
        return self.mux_many([(b, u)])[0]


def _same_scale(*parts: Pair) -> None:
    F = parts[0][0].frac_bits
    for p in parts:
        if p[0].frac_bits != F or p[1].frac_bits != F:
            raise ValueError("operands carry different fixed-point scales")
        if p[0].ring != parts[0][0].ring:
            raise ValueError("operands live in different rings")
