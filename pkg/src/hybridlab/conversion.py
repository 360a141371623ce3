"""Complex CKKS <-> MPC conversion, share-modulus switching and payload accounting.

A boundary ciphertext carries two real vectors as ``x + i y``. Moving it into
MPC costs one ciphertext in each direction instead of two.

Conventions:

* ``P1`` (server) holds ciphertexts; ``P0`` (client) holds the secret key, so
  "encryption" is the :data:`~hybridlab.slot_engine.CLIENT` key tag and only P0
  may strip it.
* Slots hold real values at the CKKS scale ``delta``. Relabelling that scale as
  ``delta / 2^F`` exposes the fixed-point integers ``round(v * 2^F)`` with no
  homomorphic work.
* Canonical decoding is linear over the integers but not modulo a share
  modulus, because the embedding has irrational entries. Shares therefore pass
  through the integer relation ``s0 + s1 = value`` produced by the extension
  step before any local decode or encode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ring_codec as rc
from .errors import ConfigViolation, DomainMismatch, Overflow
from .mpc_engine import Engine, FixedShare, Pair
from .slot_engine import CLIENT, CipherVec, ModulusChain, OpLedger, encrypt, mod_switch_to

HEADER_BYTES = 0


# ---------------------------------------------------------------------------
# payload


def ct_bytes(N_ring: int, limbs: int) -> int:
    """Serialized size of a two-component RNS ciphertext with 8-byte words."""
    return 2 * N_ring * limbs * 8


@dataclass(frozen=True)
class PayloadReport:
    """Bytes for one conversion pair of ``k`` real vectors."""

    mode: str  # "complex" or "real"
    k: int
    N_ring: int
    limbs_c2m: int
    limbs_m2c: int
    trimmed: bool = False
    header_bytes: int = HEADER_BYTES

    @property
    def cts_per_direction(self) -> int:
        return math.ceil(self.k / 2) if self.mode == "complex" else self.k

    @property
    def bytes_c2m(self) -> int:
        return self.cts_per_direction * (ct_bytes(self.N_ring, self.limbs_c2m) + self.header_bytes)

    @property
    def bytes_m2c(self) -> int:
        return self.cts_per_direction * (ct_bytes(self.N_ring, self.limbs_m2c) + self.header_bytes)

    @property
    def total_bytes(self) -> int:
        return self.bytes_c2m + self.bytes_m2c

    def to_record(self) -> dict[str, object]:
        return {
            "mode": self.mode,
            "k": self.k,
            "trimmed": self.trimmed,
            "cts_per_direction": self.cts_per_direction,
            "limbs_c2m": self.limbs_c2m,
            "limbs_m2c": self.limbs_m2c,
            "bytes_c2m": self.bytes_c2m,
            "bytes_m2c": self.bytes_m2c,
            "bytes": self.total_bytes,
        }


def pair_payload(mode: str, k: int, N_ring: int, limbs: int, trim_limbs: int | None = None, header_bytes: int = 0) -> PayloadReport:
    """Payload of a conversion pair; trimming shrinks only the CKKS-to-MPC leg."""
    if mode not in ("complex", "real"):
        raise ValueError(f"unknown conversion mode {mode!r}")
    c2m = limbs if trim_limbs is None else trim_limbs
    return PayloadReport(mode, k, N_ring, c2m, limbs, trim_limbs is not None, header_bytes)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ConversionConfig:
    """Boundary parameters.

    ``delta`` is the CKKS scale on real slot values. ``b_max`` bounds the
    fixed-point integers ``|v| * 2^F`` crossing the boundary; it defaults to
    ``2^(F+8)``, i.e. magnitudes below 256.
    """

    chain: ModulusChain
    ell: int = 43
    F: int = 13
    sigma: int = 40
    delta: int = 2**40
    b_max: int | None = None
    L_conv: int | None = None
    ext_mode: str = "exact"  # share extension on the MPC-to-CKKS leg

    def __post_init__(self) -> None:
        if self.b_max is None:
            object.__setattr__(self, "b_max", 2 ** (self.F + 8))
        if self.delta & (self.delta - 1) or self.delta < 2**self.F:
            raise ConfigViolation("delta must be a power of two of at least 2^F")
        if self.b_max >= 2 ** (self.ell - 1):
            raise ConfigViolation("b_max must fit the signed MPC ring")
        level = self.L_conv if self.L_conv is not None else choose_L_conv(self)
        if not self.level_ok(level):
            raise ConfigViolation(f"level {level} violates the boundary inequalities")
        object.__setattr__(self, "L_conv", level)

    @property
    def delta_int(self) -> int:
        """Encoding scale for the fixed-point integers."""
        return self.delta >> self.F

    @property
    def coeff_bound(self) -> int:
        """Bound on centered plaintext coefficients of a boundary vector."""
        return self.delta_int * self.b_max

    def Q(self, level: int) -> int:
        return self.chain.partial_products[level]

    @property
    def Q_conv(self) -> int:
        return self.Q(self.L_conv)

    def level_ok(self, level: int) -> bool:
        if not 0 <= level <= self.chain.max_level:
            return False
        Q = self.Q(level)
        return (
            Q.bit_length() - 1 >= self.ell + self.sigma + 1
            and Q // 2 > self.coeff_bound
            and Q.bit_length() - 1 >= self.coeff_bound.bit_length() + self.sigma
        )


def choose_L_conv(cfg: ConversionConfig) -> int:
    """Smallest level whose modulus keeps share switching statistically safe."""
    for level in range(cfg.chain.max_level + 1):
        if cfg.level_ok(level):
            return level
    raise ConfigViolation("no level of the chain satisfies the boundary inequalities")


def trim(ct: CipherVec, cfg: ConversionConfig) -> CipherVec:
    """Drop limbs down to ``L_conv``; slot values are untouched."""
    if ct.level < cfg.L_conv:
        raise ConfigViolation(f"ciphertext level {ct.level} is already below L_conv={cfg.L_conv}")
    return mod_switch_to(ct, cfg.L_conv, cfg.chain)


# ---------------------------------------------------------------------------
# share-modulus switching


def _extend(a0: int, a1: int, M: int, exact: bool, bound: int) -> tuple[int, int]:
    """Integer shares ``s0 + s1 = cl_M(a0 + a1)``.

    ``a0, a1`` are residues mod ``M`` of a value ``x`` with ``|cl(x)| <= bound``.
    P0 shifts its share by ``H = floor(M/2)`` so the shifted value sits near
    ``H``; the single wrap bit of ``b0 + a1`` then decides the lift. In exact
    mode the wrap bit comes from a dealer-assisted comparison. In local mode P0
    guesses it as ``b0 > H`` with no interaction, which is wrong with
    probability at most ``bound / M``.
    """
    H = M // 2
    b0 = (a0 + H) % M
    if exact:
        x_shift = (a0 + a1 + H) % M
        w = 1 if b0 > x_shift else 0
    else:
        w = 1 if b0 > H else 0
    return b0 - M * w - H, a1


def extend_shares(s0, s1, M: int, exact: bool = True, bound: int | None = None) -> tuple[list[int], list[int]]:
    bound = M // 2 if bound is None else bound
    out0, out1 = [], []
    for a0, a1 in zip(s0, s1):
        x0, x1 = _extend(int(a0) % M, int(a1) % M, M, exact, bound)
        out0.append(x0)
        out1.append(x1)
    return out0, out1


def field2ring(s0, s1, Q: int, ell: int, exact: bool = False) -> tuple[list[int], list[int]]:
    """Shares mod odd ``Q`` of ``x`` with ``|cl_Q(x)| < 2^(ell-1)`` to shares mod ``2^ell``.

    Local mode fails with probability at most ``2^(ell-1)/Q`` per element, which
    is below ``2^-sigma`` whenever ``log2 Q >= ell + sigma``.
    """
    if Q % 2 == 0:
        raise ValueError("the field modulus must be odd")
    t0, t1 = extend_shares(s0, s1, Q, exact, 1 << (ell - 1))
    M = 1 << ell
    return [v % M for v in t0], [v % M for v in t1]


def ring2field(u0, u1, ell: int, Q: int, sigma: int = 40, exact: bool = True) -> tuple[list[int], list[int]]:
    """Shares mod ``2^ell`` to shares mod ``Q`` preserving the centered value.

    The lifted shares satisfy ``m0' + m1' = 2^(ell+sigma) + cl(m)`` over the
    integers; P1 removes the offset before reducing mod ``Q``. Local mode needs
    ``|cl(m)| < 2^(ell-sigma-1)`` and fails with probability at most ``2^-sigma``.
    """
    M = 1 << ell
    off = 1 << (ell + sigma)
    t0, t1 = extend_shares(u0, u1, M, exact, 1 << max(ell - sigma - 1, 0))
    m0 = [v + off for v in t0]
    return [v % Q for v in m0], [(v - off) % Q for v in t1]


# ---------------------------------------------------------------------------
# boundary protocols


@dataclass
class ConversionLog:
    """Count and bytes of boundary ciphertexts moved so far."""

    c2m_cts: int = 0
    m2c_cts: int = 0
    c2m_bytes: int = 0
    m2c_bytes: int = 0
    events: list[dict[str, object]] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return self.c2m_bytes + self.m2c_bytes

    def record(self, direction: str, limbs: int, N_ring: int, tag: str) -> None:
        b = ct_bytes(N_ring, limbs)
        if direction == "c2m":
            self.c2m_cts += 1
            self.c2m_bytes += b
        else:
            self.m2c_cts += 1
            self.m2c_bytes += b
        self.events.append({"dir": direction, "tag": tag, "limbs": limbs, "bytes": b})


def _decrypt_tagged(ct_owner: str) -> None:
    if ct_owner != CLIENT:
        raise DomainMismatch("P0 can only decrypt ciphertexts under its own key")


def _pair_from_ints(eng: Engine, v0: list[int], v1: list[int], F: int) -> Pair:
    ring = eng.ring
    M = 1 << ring.ell
    a = np.array([v % M for v in v0], dtype=np.uint64)
    b = np.array([v % M for v in v1], dtype=np.uint64)
    return FixedShare(0, a, F, ring), FixedShare(1, b, F, ring)


def c2m_complex(
    ct: CipherVec,
    cfg: ConversionConfig,
    eng: Engine,
    seed: int,
    log: ConversionLog | None = None,
    tag: str = "",
) -> tuple[Pair, Pair]:
    """Ciphertext of ``x + i y`` to shares of ``round(x 2^F)`` and ``round(y 2^F)``.

    Steps: P1 adds a uniform ring mask and sends; P0 strips the key tag; the
    shares are extended over the integers; each party decodes its share exactly
    and rounds; the rounded slot shares are reduced mod ``2^ell``.
    """
    if ct.level < cfg.L_conv:
        raise ConfigViolation(f"ciphertext level {ct.level} below L_conv={cfg.L_conv}")
    if eng.ring.ell != cfg.ell or eng.ring.F != cfg.F:
        raise ConfigViolation("engine ring does not match the conversion config")
    n = ct.n
    N = 2 * n
    Q = cfg.Q(ct.level)
    codec = rc.Codec(n, float(cfg.delta))
    z = ct.slots * 2.0**cfg.F
    if np.max(np.abs(np.concatenate([z.real, z.imag])), initial=0.0) > cfg.b_max:
        raise Overflow("boundary value exceeds b_max")
    t = codec.encode(ct.slots, Q)
    # P1 masks and sends one ciphertext
    r_hat = rc.uniform_ring(Q, seed, N)
    d = t + r_hat
    share1 = -r_hat
    if log is not None:
        log.record("c2m", ct.level + 1, N, tag)
    # P0 decrypts the masked element
    _decrypt_tagged(ct.owner)
    share0 = d
    s0, s1 = extend_shares(share0.coeffs, share1.coeffs, Q, exact=False, bound=cfg.coeff_bound)
    re0, im0 = rc.decode_exact(s0, cfg.delta_int, n)
    re1, im1 = rc.decode_exact(s1, cfg.delta_int, n)
    return _pair_from_ints(eng, re0, re1, cfg.F), _pair_from_ints(eng, im0, im1, cfg.F)


def _align(eng: Engine, x: Pair, y: Pair) -> tuple[Pair, Pair, int]:
    Fx, Fy = x[0].frac_bits, y[0].frac_bits
    F = max(Fx, Fy)
    if Fx < F:
        x = eng.mul_int(x, 1 << (F - Fx), frac_bits=F)
    if Fy < F:
        y = eng.mul_int(y, 1 << (F - Fy), frac_bits=F)
    return x, y, F


def m2c_complex(
    x: Pair,
    y: Pair,
    cfg: ConversionConfig,
    eng: Engine,
    ledger: OpLedger,
    level: int,
    log: ConversionLog | None = None,
    tag: str = "",
) -> CipherVec:
    """Shares of ``x`` and ``y`` to one fresh ciphertext of ``x + i y`` at ``level``.

    The share extension runs on the slot shares, before encoding, so the
    ``2^ell`` wrap of the MPC ring never enters the encoding.
    """
    if x[0].shape != y[0].shape or x[0].values.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    x, y, F = _align(eng, x, y)
    if F > int(math.log2(cfg.delta)):
        raise ConfigViolation("share scale exceeds the boundary scale")
    n = x[0].values.size
    if n & (n - 1):
        raise ValueError("slot count must be a power of two")
    N = 2 * n
    Q = cfg.Q(level)
    delta_int = cfg.delta >> F
    if eng.debug:
        mag = np.max(np.abs(np.concatenate([eng.reconstruct_int(x), eng.reconstruct_int(y)])), initial=0)
        if delta_int * int(mag) * 2 >= Q // 2:
            raise Overflow("delta * |value| reaches Q/2")
    exact = cfg.ext_mode == "exact"
    ell = cfg.ell
    xr0, xr1 = extend_shares(x[0].values, x[1].values, 1 << ell, exact, 1 << max(ell - cfg.sigma - 1, 0))
    yr0, yr1 = extend_shares(y[0].values, y[1].values, 1 << ell, exact, 1 << max(ell - cfg.sigma - 1, 0))
    t0 = rc.RingElem.from_ints(rc.encode_exact(xr0, yr0, delta_int), Q)
    t1 = rc.RingElem.from_ints(rc.encode_exact(xr1, yr1, delta_int), Q)
    # P0 encrypts its encoded share and sends; P1 adds its own in the ring
    if log is not None:
        log.record("m2c", level + 1, N, tag)
    total = t0 + t1
    slots = rc.Codec(n).decode(total, float(cfg.delta))
    return encrypt(slots, ledger, level=level, scale=float(cfg.delta), owner=CLIENT)


def default_config(depth: int = 4, scale_bits: int = 40, **kw) -> ConversionConfig:
    chain = ModulusChain.generate(depth, scale_bits)
    return ConversionConfig(chain, delta=2**scale_bits, **kw)


def mask_view(t: rc.RingElem, Q: int, seed: int) -> rc.RingElem:
    """What P0 observes in the CKKS-to-MPC step for plaintext ``t`` and mask seed."""
    return t + rc.uniform_ring(Q, seed, t.N)


__all__ = [
    "ConversionConfig",
    "ConversionLog",
    "PayloadReport",
    "c2m_complex",
    "choose_L_conv",
    "ct_bytes",
    "default_config",
    "extend_shares",
    "field2ring",
    "m2c_complex",
    "mask_view",
    "pair_payload",
    "ring2field",
    "trim",
]
