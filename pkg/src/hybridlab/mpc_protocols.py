"""Nonlinear layers on secret shares: MBMax, MBLN and the two GELU variants.

Public constant factors are applied by local integer scaling without a
truncation. The result simply carries more fractional bits, which the next
conversion absorbs into its encoding scale, so none of these factors costs a
round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCandidates, ShapeMismatch
from .he_kernels import GeluCoeffs, fit_gelu_coeffs
from .mpc_engine import Engine, Pair


@dataclass(frozen=True)
class MBMaxParams:
    c: float = 1.0
    R_d: float = 1.0
    p: int = 5

    def __post_init__(self) -> None:
        if self.p != 5:
            raise ValueError("the power map is fixed at p = 5")
        if self.R_d <= 0:
            raise ValueError("R_d must be positive")

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) + self.c) ** self.p / self.R_d


@dataclass(frozen=True)
class MBLNParams:
    gamma: np.ndarray
    beta: np.ndarray
    l: float = 1.0
    R_d: float = 1.0

    @property
    def gamma_tilde(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=float) / (self.l * self.R_d)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.gamma_tilde * (X - X.mean(axis=-1, keepdims=True)) + self.beta

    @classmethod
    def identity(cls, d: int) -> "MBLNParams":
        return cls(np.ones(d), np.zeros(d))


@dataclass(frozen=True)
class SurrogateParams:
    mbmax: MBMaxParams = field(default_factory=MBMaxParams)
    mbln: MBLNParams | None = None
    gelu: GeluCoeffs = field(default_factory=fit_gelu_coeffs)


# ---------------------------------------------------------------------------
# MBMax


def _factor_bits(F: int, want: int, max_frac_bits: int | None) -> int:
    """Fractional bits for a public factor, capped so the output stays within ``max_frac_bits``."""
    if max_frac_bits is None:
        return want
    bits = min(want, max_frac_bits - F)
    if bits < 0:
        raise ValueError(f"input carries {F} fractional bits, above the cap {max_frac_bits}")
    return bits


def mbmax(eng: Engine, X: Pair, params: MBMaxParams, max_frac_bits: int | None = None) -> Pair:
    """``(X + c)^5 / R_d`` elementwise; three rounds.

    The factor ``1/R_d`` is applied locally to ``Xbar^5`` at ``2F`` fractional
    bits (fewer if ``max_frac_bits`` requires), so the output carries up to
    ``3F`` fractional bits.
    """
    F = X[0].frac_bits
    e = _factor_bits(F, 2 * F, max_frac_bits)
    with eng.transcript.protocol("mbmax"):
        xb = eng.add_const(X, params.c)
        x2 = eng.mul_fixed(xb, xb)
        x4 = eng.mul_fixed(x2, x2)
        x5 = eng.mul_fixed(x4, xb)
        k = int(np.rint(2.0**e / params.R_d))
        return eng.mul_int(x5, k, frac_bits=F + e)


# ---------------------------------------------------------------------------
# MBLN


def mbln(eng: Engine, X: Pair, params: MBLNParams, max_frac_bits: int | None = None) -> Pair:
    """``gamma~ * (x - mean(x)) + beta`` per row; no interaction.

    Centering is done exactly as ``d*x - rowsum`` and the public factor
    ``gamma~/d`` is applied per channel at extra fractional precision.
    """
    d = X[0].shape[-1]
    if d == 0:
        raise ShapeMismatch("rows must be non-empty")
    gt = np.broadcast_to(params.gamma_tilde, (d,))
    beta = np.broadcast_to(np.asarray(params.beta, dtype=float), (d,))
    if gt.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("gamma and beta must match the row width")
    F = X[0].frac_bits
    with eng.transcript.protocol("mbln"):
        s = eng.rowsum(X)
        z = eng.sub(eng.mul_int(X, d), eng.bcast(s, d))
        kf = _factor_bits(F, F + math.ceil(math.log2(d)) if d > 1 else F, max_frac_bits)
        k = np.rint(gt / d * 2.0**kf).astype(np.int64)
        y = eng.mul_int(z, k, frac_bits=F + kf)
        return eng.add_const(y, beta)


# ---------------------------------------------------------------------------
# GELU


def _zones(eng: Engine, x: Pair, threshold: float) -> tuple[Pair, Pair, Pair, Pair]:
    """Indicators for ``[-t, 0)``, ``[0, t)``, ``[t, inf)`` and ``(-inf, -t)``.

    Three batched comparisons (two rounds) and one round of XORs.
    """
    shape = x[0].shape
    xs = eng.concat([x, x, x])
    taus = np.concatenate([np.full(x[0].values.size, v) for v in (-threshold, 0.0, threshold)])
    bits = eng.cmp(xs, taus)
    b_neg, b_zero, b_pos = eng.split(bits, [shape] * 3)
    z0, z1 = eng.xor_many([(b_neg, b_zero), (b_zero, b_pos)])
    # 1 xor b = 1 - b is local
    z2 = eng.add_int(eng.neg(b_pos), np.ones(shape, dtype=np.int64))
    return z0, z1, z2, b_neg


def _select(eng: Engine, x: Pair, f0: Pair, f1: Pair, threshold: float) -> Pair:
    z0, z1, z2, _ = _zones(eng, x, threshold)
    m0, m1, m2 = eng.mux_many([(z0, f0), (z1, f1), (z2, x)])
    return eng.add(eng.add(m0, m1), m2)


def gelu_candidates(eng: Engine, x: Pair, coeffs: GeluCoeffs, extra_bits: int = 6) -> tuple[Pair, Pair]:
    """``F0`` and ``F1`` on shares; three rounds (``x^2``; ``x^3, x^4``; coefficients).

    Coefficients are encoded with ``F + extra_bits`` fractional bits; the sum is
    truncated once, which leaves room for candidates up to ``2^(ell-3-2F-extra_bits)``.
    """
    F = x[0].frac_bits
    kf = F + extra_bits
    x2 = eng.mul_fixed(x, x)
    x3, x4 = eng.batch(mults=[(x2, x, F), (x2, x2, F)])

    def comb(sign: int) -> Pair:
        terms = [(x4, coeffs.a), (x3, sign * coeffs.b), (x2, coeffs.c), (x, 0.5 + sign * coeffs.d)]
        acc = None
        for t, c in terms:
            part = eng.mul_int(t, int(np.rint(c * 2.0**kf)), frac_bits=F + kf)
            acc = part if acc is None else eng.add(acc, part)
        return eng.add_const(acc, coeffs.e)

    f0, f1 = eng.batch(scales=[(comb(-1), 1, 0, kf), (comb(+1), 1, 0, kf)])
    return f0, f1


def gelu_protocol(
    eng: Engine,
    variant: str,
    x: Pair,
    coeffs: GeluCoeffs,
    f0: Pair | None = None,
    f1: Pair | None = None,
) -> Pair:
    """Piecewise GELU surrogate.

    ``preeval`` selects among precomputed candidates (four rounds); ``mpc_poly``
    evaluates the candidates on shares first (three more rounds).
    """
    with eng.transcript.protocol(f"gelu_{variant}"):
        if variant == "preeval":
            if f0 is None or f1 is None:
                raise MissingCandidates("the pre-evaluated variant needs F0 and F1")
        elif variant == "mpc_poly":
            with eng.transcript.protocol("gelu_candidates"):
                f0, f1 = gelu_candidates(eng, x, coeffs)
        else:
            raise ValueError(f"unknown GELU variant {variant!r}")
        with eng.transcript.protocol("gelu_select"):
            return _select(eng, x, f0, f1, coeffs.threshold)


def zone_indicators(eng: Engine, x: Pair, threshold: float = 2.7) -> tuple[Pair, Pair, Pair, Pair]:
    """Public wrapper over the zone computation, for inspection and tests."""
    return _zones(eng, x, threshold)
