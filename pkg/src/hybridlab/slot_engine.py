"""Exact slot-level emulation of CKKS ciphertext algebra.

Slots hold exact complex values. Levels and scales are tracked as bookkeeping
only, and every primitive is charged to an :class:`OpLedger`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DomainMismatch,
    LengthMismatch,
    LevelExhausted,
    LevelMismatch,
    ScaleMismatch,
)

OP_KINDS = ("add", "ptmul", "ctmul", "relin", "rot", "conj", "rescale", "modswitch")

# Scales produced by different chain primes drift by far less than this; a real
# library absorbs the drift through its choice of encoding scales.
SCALE_RTOL = 1e-6

CLIENT = "client-key"
PUBLIC = "public"

_uid = itertools.count()


# ---------------------------------------------------------------------------
# modulus chain


def _is_probable_prime(q: int) -> bool:
    if q < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if q % p == 0:
            return q == p
    d, s = q - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in small:
        x = pow(a, d, q)
        if x in (1, q - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, q)
            if x == q - 1:
                break
        else:
            return False
    return True


def primes_near(bits: int, count: int, step: int = 2, exclude: Iterable[int] = ()) -> list[int]:
    """Return ``count`` distinct odd primes closest to ``2**bits``.

    Candidates alternate above and below the target so the product of any prefix
    stays close to a power of two.
    """
    target = 1 << bits
    taken = set(exclude)
    out: list[int] = []
    k = 1
    while len(out) < count:
        for cand in (target + k, target - k):
            if cand % 2 == 1 and cand not in taken and _is_probable_prime(cand):
                out.append(cand)
                taken.add(cand)
                if len(out) == count:
                    break
        k += step
    return out


@dataclass(frozen=True)
class ModulusChain:
    """RNS chain ``q_0..q_L`` with the target scale ``delta``."""

    primes: tuple[int, ...]
    target_scale: float

    def __post_init__(self) -> None:
        if any(q % 2 == 0 for q in self.primes):
            raise ValueError("chain primes must be odd")
        if len(set(self.primes)) != len(self.primes):
            raise ValueError("chain primes must be distinct")

    @classmethod
    def generate(cls, depth: int, scale_bits: int = 40, base_bits: int = 60) -> "ModulusChain":
        """Chain with one base prime and ``depth`` scale primes near ``2**scale_bits``."""
        base = primes_near(base_bits, 1)
        scaled = primes_near(scale_bits, depth, exclude=base)
        return cls(tuple(base + scaled), float(2**scale_bits))

    @property
    def max_level(self) -> int:
        return len(self.primes) - 1

    @property
    def partial_products(self) -> list[int]:
        out, acc = [], 1
        for q in self.primes:
            acc *= q
            out.append(acc)
        return out

    def q(self, level: int) -> int:
        return self.primes[level]


# ---------------------------------------------------------------------------
# ledger


class OpLedger:
    """Thread-safe counter of homomorphic primitives.

    ``counts`` are raw counts. Rotations are additionally tracked by
    ``(source ciphertext, amount)`` so repeated shifts of the same value can be
    reported once (``dedup_counts``).
    """

    def __init__(self, label: str = "") -> None:
        self.label = label
        self.counts: dict[str, int] = {k: 0 for k in OP_KINDS}
        self._rot_keys: set[tuple[int, int]] = set()
        self._lock = threading.Lock()

    def charge(self, kind: str, k: int = 1, key: tuple[int, int] | None = None) -> None:
        if kind not in self.counts:
            raise KeyError(kind)
        with self._lock:
            self.counts[kind] += k
            if key is not None:
                self._rot_keys.add(key)

    def dedup_counts(self) -> dict[str, int]:
        out = dict(self.counts)
        out["rot"] = len(self._rot_keys)
        return out

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)

    def to_record(self) -> dict[str, object]:
        """Flat key -> value record."""
        rec: dict[str, object] = {"label": self.label}
        rec.update(self.counts)
        rec["rot_dedup"] = len(self._rot_keys)
        return rec

    def merge(self, other: "OpLedger") -> None:
        with self._lock:
            for k, v in other.counts.items():
                self.counts[k] += v
            self._rot_keys |= other._rot_keys

    def __getitem__(self, kind: str) -> int:
        return self.counts[kind]

    def __repr__(self) -> str:
        nz = {k: v for k, v in self.counts.items() if v}
        return f"OpLedger({self.label!r}, {nz})"


def diff(after: Mapping[str, int], before: Mapping[str, int]) -> dict[str, int]:
    return {k: after[k] - before.get(k, 0) for k in after}


# ---------------------------------------------------------------------------
# latency profiles


@dataclass(frozen=True)
class PrimitiveProfile:
    """Per-primitive latency in seconds."""

    name: str
    latency: Mapping[str, float]

    def __post_init__(self) -> None:
        if any(v <= 0 for v in self.latency.values()):
            raise ValueError("latencies must be positive")


def _ms(**kw: float) -> dict[str, float]:
    return {k: v * 1e-3 for k, v in kw.items()}


PHANTOM = PrimitiveProfile("phantom", _ms(add=0.07, ptmul=0.36, ctmul=2.65, rot=2.32, conj=2.33))
LIBERATE = PrimitiveProfile("liberate", _ms(add=3.04, ptmul=13.72, ctmul=48.66, rot=32.70, conj=22.73))
PROFILES = {"phantom": PHANTOM, "liberate": LIBERATE}


def ledger_proxy(
    ledger: OpLedger | Mapping[str, int], profile: PrimitiveProfile = PHANTOM, keyswitch_only: bool = True
) -> float:
    """Weighted latency proxy in seconds.

    With ``keyswitch_only`` only rotations and ciphertext products are summed.
    """
    counts = ledger.counts if isinstance(ledger, OpLedger) else ledger
    kinds = ("rot", "ctmul") if keyswitch_only else tuple(profile.latency)
    return float(sum(counts.get(k, 0) * profile.latency[k] for k in kinds))


# ---------------------------------------------------------------------------
# values


@dataclass(frozen=True)
class PlainVec:
    slots: np.ndarray
    scale: float = 1.0

    def __len__(self) -> int:
        return len(self.slots)


@dataclass(frozen=True, eq=False)
class CipherVec:
    slots: np.ndarray
    level: int
    scale: float
    ledger: OpLedger
    owner: str = CLIENT
    noise_amp: float = 0.0
    uid: int = field(default_factory=lambda: next(_uid))

    def __post_init__(self) -> None:
        if self.level < 0:
            raise LevelExhausted("negative level")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def n(self) -> int:
        return len(self.slots)

    def _derive(self, slots: np.ndarray, **kw) -> "CipherVec":
        args = dict(level=self.level, scale=self.scale, ledger=self.ledger, owner=self.owner, noise_amp=self.noise_amp)
        args.update(kw)
        return CipherVec(slots, **args)

    # operator sugar
    def __add__(self, other: "CipherVec | PlainVec") -> "CipherVec":
        return pointwise("add", self, other)

    def __mul__(self, other: "CipherVec | PlainVec") -> "CipherVec":
        return pointwise("ctmul" if isinstance(other, CipherVec) else "ptmul", self, other)

    def rot(self, r: int) -> "CipherVec":
        return permute("rot", self, r)

    def conj(self) -> "CipherVec":
        return permute("conj", self)


def encrypt(
    values: np.ndarray,
    ledger: OpLedger,
    level: int,
    scale: float,
    owner: str = CLIENT,
    noise_amp: float = 0.0,
) -> CipherVec:
    """Wrap a slot vector as a ciphertext. No ledger charge."""
    return CipherVec(np.asarray(values, dtype=np.complex128).copy(), level, scale, ledger, owner, noise_amp)


def decrypt(ct: CipherVec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Return the slots, adding Gaussian noise of amplitude ``noise_amp`` if set."""
    out = ct.slots.copy()
    if ct.noise_amp > 0:
        rng = rng or np.random.default_rng()
        out = out + ct.noise_amp * (rng.standard_normal(ct.n) + 1j * rng.standard_normal(ct.n))
    return out


def plain(values: np.ndarray, scale: float = 1.0) -> PlainVec:
    return PlainVec(np.asarray(values, dtype=np.complex128), scale)


def pointwise(kind: str, a: CipherVec, b: CipherVec | PlainVec) -> CipherVec:
    """Slotwise ``add``, ``ptmul`` or ``ctmul``."""
    if len(a.slots) != len(b.slots):
        raise LengthMismatch(f"{len(a.slots)} != {len(b.slots)}")
    if isinstance(b, CipherVec):
        if b.ledger is not a.ledger:
            raise DomainMismatch("operands charge different ledgers")
        if b.owner != a.owner:
            raise DomainMismatch("operands under different keys")
    if kind == "add":
        if abs(a.scale - b.scale) > SCALE_RTOL * max(a.scale, b.scale):
            raise ScaleMismatch(f"{a.scale} != {b.scale}")
        if isinstance(b, CipherVec) and a.level != b.level:
            raise LevelMismatch(f"{a.level} != {b.level}")
        a.ledger.charge("add")
        return a._derive(a.slots + b.slots)
    if kind == "ptmul":
        if isinstance(b, CipherVec):
            raise TypeError("ptmul expects a plaintext operand")
        a.ledger.charge("ptmul")
        return a._derive(a.slots * b.slots, scale=a.scale * b.scale)
    if kind == "ctmul":
        if not isinstance(b, CipherVec):
            raise TypeError("ctmul expects a ciphertext operand")
        if a.level != b.level:
            raise LevelMismatch(f"{a.level} != {b.level}")
        a.ledger.charge("ctmul")
        a.ledger.charge("relin")
        return a._derive(a.slots * b.slots, scale=a.scale * b.scale)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def permute(kind: str, a: CipherVec, r: int = 0) -> CipherVec:
    """Cyclic left rotation by ``r`` or slotwise conjugation."""
    if kind == "rot":
        r %= a.n
        if r == 0:
            return a
        a.ledger.charge("rot", key=(a.uid, r))
        return a._derive(np.roll(a.slots, -r))
    if kind == "conj":
        a.ledger.charge("conj")
        return a._derive(np.conj(a.slots))
    raise ValueError(f"unknown permutation kind {kind!r}")


def level_op(kind: str, a: CipherVec, chain: ModulusChain) -> CipherVec:
    """``rescale`` divides the scale by ``q_level``; ``mod_switch`` keeps it."""
    if a.level == 0:
        raise LevelExhausted("no prime left to drop")
    if kind == "rescale":
        a.ledger.charge("rescale")
        return a._derive(a.slots, level=a.level - 1, scale=a.scale / chain.q(a.level))
    if kind in ("mod_switch", "modswitch"):
        a.ledger.charge("modswitch")
        return a._derive(a.slots, level=a.level - 1)
    raise ValueError(f"unknown level op {kind!r}")


def rescale(a: CipherVec, chain: ModulusChain) -> CipherVec:
    return level_op("rescale", a, chain)


def mod_switch(a: CipherVec, chain: ModulusChain) -> CipherVec:
    return level_op("mod_switch", a, chain)


def mod_switch_to(a: CipherVec, level: int, chain: ModulusChain) -> CipherVec:
    while a.level > level:
        a = mod_switch(a, chain)
    return a
