"""Encrypted linear kernels over the slot emulator.

* :func:`project`: plaintext-weight projection with complexified inputs and a
  baby-step/giant-step schedule.
* :func:`score_kernel`: per-head ``Q K^T`` in folded-diagonal form, exported as
  a minimal stream.
* :func:`value_kernel`: per-head ``P V`` from folded weights and head-major
  values.
* :func:`gelu_preeval`: the two sign-specialised quartic GELU candidates.
* :func:`repack_rma`: rotation-mask-accumulate slot permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import packing as pk
from .errors import LevelExhausted, NotPowerOfTwo, OddSequenceLength, PlanShapeMismatch
from .slot_engine import (
    CipherVec,
    ModulusChain,
    PlainVec,
    mod_switch_to,
    permute,
    plain,
    pointwise,
    rescale,
)

# ---------------------------------------------------------------------------
# small helpers


@lru_cache(maxsize=None)
def _const(n: int, value: complex) -> PlainVec:
    a = np.full(n, value, dtype=np.complex128)
    a.setflags(write=False)
    return PlainVec(a, 1.0)


def add_all(cts: Iterable[CipherVec]) -> CipherVec:
    acc = None
    for c in cts:
        acc = c if acc is None else pointwise("add", acc, c)
    if acc is None:
        raise ValueError("nothing to sum")
    return acc


def complexify(a: CipherVec, b: CipherVec | None) -> CipherVec:
    """``a + i b``."""
    if b is None:
        return a
    return pointwise("add", a, pointwise("ptmul", b, _const(a.n, 1j)))


def real_part(z: CipherVec) -> CipherVec:
    """``(z + conj z) / 2``."""
    return pointwise("ptmul", pointwise("add", z, permute("conj", z)), _const(z.n, 0.5))


def split_complex(z: CipherVec) -> tuple[CipherVec, CipherVec]:
    """Real and imaginary channels as two ciphertexts sharing one conjugation."""
    zc = permute("conj", z)
    re = pointwise("ptmul", pointwise("add", z, zc), _const(z.n, 0.5))
    neg = pointwise("ptmul", zc, _const(z.n, -1.0))
    im = pointwise("ptmul", pointwise("add", z, neg), _const(z.n, -0.5j))
    return re, im


# ---------------------------------------------------------------------------
# rotation banks


@dataclass
class RotationBank:
    """Lazily filled cache of shifted copies of ``base``."""

    base: CipherVec
    kind: str
    m: int
    C: int | None = None
    entries: dict[int, CipherVec] = field(default_factory=dict)

    def _norm(self, offset: int) -> int:
        if self.kind == "psi":
            return offset % self.m
        if self.kind == "phi":
            return offset % (self.base.n // self.m)
        if self.kind == "phi_c":
            C = min(self.C or 0, self.base.n // self.m)
            return offset % C
        raise ValueError(f"unknown bank kind {self.kind!r}")

    def __getitem__(self, offset: int) -> CipherVec:
        k = self._norm(offset)
        if k == 0:
            return self.base
        hit = self.entries.get(k)
        if hit is None:
            hit = pk.shift(self.base, self.kind, k, m=self.m, C=self.C)
            self.entries[k] = hit
        return hit

    def offsets(self) -> list[int]:
        return sorted(self.entries)


def build_bank(ct: CipherVec, offsets: Iterable[int], kind: str, m: int, C: int | None = None) -> RotationBank:
    bank = RotationBank(ct, kind, m, C)
    for o in offsets:
        bank[o]
    return bank


# ---------------------------------------------------------------------------
# projection


def pi_s(H: int, d_h: int) -> np.ndarray:
    """Score-friendly column order: position ``u*H + h`` holds column ``h*d_h + u``."""
    u, h = np.divmod(np.arange(H * d_h), H)
    return h * d_h + u


def head_major_map(H: int, d_h: int, H_blk: int, stride: int) -> np.ndarray:
    """Column order for head-major blocks of ``H_blk`` heads with segment stride.

    Position ``b*H_blk*stride + h~*stride + u`` holds column ``(b*H_blk+h~)*d_h+u``;
    padding positions hold ``-1``.
    """
    B = -(-H // H_blk)
    out = np.full(B * H_blk * stride, -1, dtype=np.int64)
    for h in range(H):
        b, hl = divmod(h, H_blk)
        base = b * H_blk * stride + hl * stride
        out[base : base + d_h] = h * d_h + np.arange(d_h)
    return out


def default_n1(C: int) -> int:
    best = 1
    for d in range(1, int(math.isqrt(C)) + 1):
        if C % d == 0:
            best = d
    return best


@dataclass
class ProjectionPlan:
    """Encoded weights for ``Y = X W``.

    ``C`` segments per input group are active and rotations wrap inside them;
    each output block exposes its first ``c_out`` segments. ``row_map`` and
    ``col_map`` give, for every input/output segment position, the source row or
    column of ``W`` (``-1`` for padding).
    """

    m: int
    n: int
    C: int
    c_out: int
    N1: int
    G: int
    B_out: int
    wseg: np.ndarray  # [B_out, N2, N1, U, 2, C]: (+/-) combined segment weights
    is_complex: bool
    d_out: int

    @property
    def N2(self) -> int:
        return self.C // self.N1

    @property
    def U(self) -> int:
        return -(-self.G // 2)

    @classmethod
    def build(
        cls,
        W: np.ndarray,
        m: int,
        n: int,
        C: int | None = None,
        c_out: int | None = None,
        N1: int | None = None,
        row_map: np.ndarray | None = None,
        col_map: np.ndarray | None = None,
    ) -> "ProjectionPlan":
        W = np.asarray(W)
        n_seg = n // m
        C = n_seg if C is None else C
        c_out = C if c_out is None else c_out
        if not (1 <= c_out <= C <= n_seg) or n % m:
            raise PlanShapeMismatch(f"need 1 <= c_out <= C <= N_seg, got {c_out}, {C}, {n_seg}")
        N1 = default_n1(C) if N1 is None else N1
        if C % N1:
            raise PlanShapeMismatch(f"N1={N1} does not divide C={C}")
        d_in, d_out = W.shape
        rmap = np.arange(d_in) if row_map is None else np.asarray(row_map)
        cmap = np.arange(d_out) if col_map is None else np.asarray(col_map)
        if rmap.max(initial=-1) >= d_in or cmap.max(initial=-1) >= d_out:
            raise PlanShapeMismatch("index map points outside W")
        G = -(-len(rmap) // C)
        B_out = -(-len(cmap) // c_out)
        U = -(-G // 2)
        N2 = C // N1

        # Wbar[row position, column position], zero-padded
        Wbar = np.zeros((2 * U * C, B_out * c_out), dtype=np.complex128)
        rp = np.flatnonzero(rmap >= 0)
        cp = np.flatnonzero(cmap >= 0)
        Wbar[np.ix_(rp, cp)] = W[np.ix_(rmap[rp], cmap[cp])]
        Wre, Wim = Wbar.real, Wbar.imag

        c = np.arange(C)
        wseg = np.zeros((B_out, N2, N1, U, 2, C), dtype=np.complex128)
        for p in range(N2):
            beta = (c - p * N1) % C
            live = beta < c_out
            for q in range(N1):
                alpha = (c + q) % C
                for u in range(U):
                    r0 = (2 * u) * C + alpha
                    r1 = (2 * u + 1) * C + alpha
                    for b in range(B_out):
                        col = b * c_out + np.where(live, beta, 0)
                        wr = Wre[r0, col] - 1j * Wre[r1, col]
                        wi = Wim[r0, col] - 1j * Wim[r1, col]
                        # the decomplexification halving is folded in here
                        wseg[b, p, q, u, 0] = np.where(live, 0.5 * (wr + 1j * wi), 0)
                        wseg[b, p, q, u, 1] = np.where(live, 0.5 * (wr - 1j * wi), 0)
        return cls(m, n, C, c_out, N1, G, B_out, wseg, bool(np.any(Wim)), len(cmap))

    def weight(self, b: int, p: int, q: int, u: int, sign: int) -> PlainVec:
        seg = self.wseg[b, p, q, u, sign]
        slots = np.zeros(self.n, dtype=np.complex128)
        slots[: self.C * self.m] = np.repeat(seg, self.m)
        return PlainVec(slots, 1.0)


def project(x_cts: Sequence[CipherVec], plan: ProjectionPlan) -> list[CipherVec]:
    """Encrypted ``Y = X W`` in segment-column layout.

    ``x_cts`` are the complexified input groups ``x^(2u) + i x^(2u+1)``. Output
    block ``b`` holds columns ``b*c_out .. b*c_out + c_out - 1`` in its first
    segments; for complex ``W`` the result carries ``X Re W + i X Im W``.
    """
    if len(x_cts) != plan.U:
        raise PlanShapeMismatch(f"expected {plan.U} complexified inputs, got {len(x_cts)}")
    if any(x.n != plan.n for x in x_cts):
        raise PlanShapeMismatch("slot count differs from the plan")
    banks = [RotationBank(x, "phi_c", plan.m, plan.C) for x in x_cts]
    signs = (0, 1) if plan.is_complex else (0,)
    out = []
    for b in range(plan.B_out):
        ys = []
        for sign in signs:
            y = None
            for p in range(plan.N2):
                acc = add_all(
                    pointwise("ptmul", banks[u][q], plan.weight(b, p, q, u, sign))
                    for q in range(plan.N1)
                    for u in range(plan.U)
                )
                term = pk.phi_c(acc, p * plan.N1, plan.C, plan.m)
                y = term if y is None else pointwise("add", y, term)
            ys.append(y)
        plus = ys[0]
        minus = ys[1] if plan.is_complex else ys[0]
        out.append(pointwise("add", plus, permute("conj", minus)))
    return out


# ---------------------------------------------------------------------------
# score kernel


def default_beta(m: int) -> int:
    best = 1
    for b in range(1, m + 1):
        if m % b == 0 and (m // b) % 2 == 0 and b * b <= 2 * m:
            best = b
    return best


@dataclass(frozen=True)
class ScorePlan:
    n: int
    m: int
    H: int
    d_h: int
    C: int
    beta: int

    def __post_init__(self) -> None:
        if self.m % 2:
            raise OddSequenceLength(f"m={self.m}")
        if self.m % self.beta or (self.m // self.beta) % 2:
            raise PlanShapeMismatch(f"beta={self.beta} must divide m with m/beta even")
        if self.H * self.m > self.n or self.C * self.m > self.n:
            raise PlanShapeMismatch("heads or active segments exceed the slot count")

    @classmethod
    def build(cls, n: int, m: int, H: int, d_h: int, C: int | None = None, beta: int | None = None) -> "ScorePlan":
        if m % 2:
            raise OddSequenceLength(f"m={m}")
        C = n // m if C is None else C
        return cls(n, m, H, d_h, C, default_beta(m) if beta is None else beta)

    @property
    def g(self) -> int:
        return self.m // self.beta

    @property
    def blocks(self) -> int:
        return -(-self.H * self.d_h // self.C)

    def phase(self, block: int) -> int:
        return (block * self.C) % self.H

    @property
    def t_q(self) -> list[int]:
        return [-s for s in range(self.beta)]

    @property
    def t_k(self) -> list[int]:
        return [j * self.beta for j in range(self.g // 2)]

    @property
    def t_k_half(self) -> list[int]:
        return [self.m // 2 + j * self.beta for j in range(self.g // 2)]

    @property
    def export_count(self) -> int:
        return pk.k_min(self.H * self.m * self.m, self.n)


@lru_cache(maxsize=None)
def _place_masks(n: int, m: int, lo: int, hi: int, s: int) -> tuple[PlainVec, PlainVec]:
    i = np.arange(n)
    region = (i >= lo) & (i < hi)
    rows = i % m
    a = (region & (rows < m - s)).astype(np.complex128)
    b = (region & (rows >= m - s)).astype(np.complex128)
    a.setflags(write=False)
    b.setflags(write=False)
    return PlainVec(a, 1.0), PlainVec(b, 1.0)


def _fold_heads(y: CipherVec, H: int, count: int, m: int) -> CipherVec:
    """Slots of segment ``p < H`` receive ``sum_a y[segment p + a*H]`` for ``a < count``.

    Doubling windows plus one rotation per extra binary digit of ``count``.
    Other segments hold partial sums and must be ignored downstream.
    """
    windows = {1: y}
    w = 1
    while 2 * w <= count:
        prev = windows[w]
        windows[2 * w] = pointwise("add", prev, permute("rot", prev, w * H * m))
        w *= 2
    acc, done = None, 0
    for bit in sorted(windows, reverse=True):
        if count - done >= bit:
            part = windows[bit]
            if acc is not None:
                part = permute("rot", part, done * H * m)
            acc = part if acc is None else pointwise("add", acc, part)
            done += bit
    return acc


def _route_heads(y: CipherVec, plan: ScorePlan) -> CipherVec:
    """Move active segment ``c`` onto segment ``c mod H``."""
    H, m, C, n = plan.H, plan.m, plan.C, plan.n
    count = -(-C // H)
    if count == 1:
        return y
    if count * H <= n // m:
        return _fold_heads(y, H, count, m)
    # rotation-tree reads would wrap into live segments: mask each segment explicitly
    parts = []
    for c in range(C):
        masked = pointwise("ptmul", y, pk.e_seg(n, m, c))
        parts.append(pk.phi(masked, (c % H) - c, m))
    return add_all(parts)


@dataclass
class ScoreOutput:
    stream: list[CipherVec]
    per_t: list[CipherVec] | None
    fmt: pk.FoldedDiagonal


def score_kernel(
    q_cts: Sequence[CipherVec], k_cts: Sequence[CipherVec], plan: ScorePlan, per_t: bool = False
) -> ScoreOutput:
    """Folded-diagonal scores of every head.

    Inputs are real ciphertexts in score-friendly order: active segment ``c`` of
    block ``l`` holds column ``l*C + c = u*H + h`` of ``Q`` (resp. ``K``).
    The export stream carries, ``t``-major, the first ``H*m`` slots of each
    folded pair ``S_t``; the intra-segment shift ``Psi^{s(t)}`` and the stream
    placement share the same two rotations.
    """
    B = plan.blocks
    if len(q_cts) != B or len(k_cts) != B:
        raise PlanShapeMismatch(f"expected {B} blocks of Q and K")
    n, m, H, beta = plan.n, plan.m, plan.H, plan.beta
    half = m // 2
    fmt = pk.FoldedDiagonal(n, H, m)

    q_banks = [build_bank(q, plan.t_q, "psi", m) for q in q_cts]
    k_banks = [build_bank(k, plan.t_k + plan.t_k_half, "psi", m) for k in k_cts]
    k_pairs = [
        [complexify(kb[j * beta], kb[half + j * beta]) for j in range(plan.g // 2)] for kb in k_banks
    ]
    phases: dict[int, list[int]] = {}
    for blk in range(B):
        phases.setdefault(plan.phase(blk), []).append(blk)

    L = H * m
    dest: dict[int, CipherVec] = {}
    outs_t: list[CipherVec] = []
    for t in range(half):
        j, s = divmod(t, beta)
        parts = []
        for r, blks in sorted(phases.items()):
            u_t = add_all(pointwise("ctmul", q_banks[b][-s], k_pairs[b][j]) for b in blks)
            routed = _route_heads(u_t, plan)
            parts.append(routed if r == 0 else pk.rot_first(routed, L, (H - r) * m))
        y = add_all(parts)

        g0 = t * L
        r1 = permute("rot", y, (s - g0) % n)
        r2 = permute("rot", y, (s - m - g0) % n) if s else None
        for k in range(g0 // n, (g0 + L - 1) // n + 1):
            lo, hi = max(g0, k * n) - k * n, min(g0 + L, (k + 1) * n) - k * n
            ma, mb = _place_masks(n, m, lo, hi, s)
            piece = pointwise("ptmul", r1, ma)
            if r2 is not None:
                piece = pointwise("add", piece, pointwise("ptmul", r2, mb))
            dest[k] = piece if k not in dest else pointwise("add", dest[k], piece)
        if per_t:
            outs_t.append(pointwise("ptmul", pk.psi(y, s, m), pk.prefix_mask(n, 0, L)))

    stream = [dest[k] for k in sorted(dest)]
    if len(stream) != plan.export_count:
        raise PlanShapeMismatch("export stream length differs from the packing bound")
    return ScoreOutput(stream, outs_t if per_t else None, fmt)


# ---------------------------------------------------------------------------
# value kernel


@dataclass(frozen=True)
class ValuePlan:
    n: int
    m: int
    H: int
    d_h: int
    H_blk: int

    def __post_init__(self) -> None:
        if self.m % 2:
            raise OddSequenceLength(f"m={self.m}")
        if self.H_blk < 1 or self.H_blk * self.stride > self.n // self.m:
            raise PlanShapeMismatch("head block does not fit the segment grid")

    @classmethod
    def build(cls, n: int, m: int, H: int, d_h: int, H_blk: int | None = None) -> "ValuePlan":
        stride = max(d_h, m // 2)
        cap = (n // m) // stride
        if cap < 1:
            raise PlanShapeMismatch(f"one head needs {stride} segments, only {n // m} available")
        return cls(n, m, H, d_h, min(H, cap) if H_blk is None else H_blk)

    @property
    def stride(self) -> int:
        """Segment distance between consecutive local heads."""
        return max(self.d_h, self.m // 2)

    @property
    def B_V(self) -> int:
        return -(-self.H // self.H_blk)

    @property
    def fmt(self) -> pk.HeadMajor:
        return pk.HeadMajor(self.n, self.H_blk, self.stride, self.m)


def channel_masks(plan: ValuePlan) -> list[PlainVec]:
    return [pk.seg_mask(plan.n, plan.m, tuple(h * plan.stride + u for h in range(plan.H_blk))) for u in range(plan.d_h)]


def value_kernel(p_cts: Sequence[CipherVec], v_cts: Sequence[CipherVec], plan: ValuePlan) -> list[CipherVec]:
    """Per-head ``P V`` in head-major layout.

    Block ``l`` of ``p_cts`` holds ``p_t + i p_{t+m/2}`` of local head ``h~`` in
    segment ``h~*stride + t``; block ``l`` of ``v_cts`` holds ``V[:, u]`` of local
    head ``h~`` in segment ``h~*stride + u``. Output segments follow ``v_cts``.
    """
    if len(p_cts) != plan.B_V or len(v_cts) != plan.B_V:
        raise PlanShapeMismatch(f"expected {plan.B_V} blocks")
    m, half = plan.m, plan.m // 2
    masks = channel_masks(plan)
    minus_i = _const(plan.n, -1j)
    out = []
    for p, v in zip(p_cts, v_cts):
        u0 = pointwise("add", v, pointwise("ptmul", pk.psi(v, half, m), minus_i))
        u_bank = RotationBank(u0, "psi", m)
        p_bank = RotationBank(p, "phi", m)
        o = None
        for t in range(half):
            b_t = add_all(pointwise("ptmul", p_bank[t - u], masks[u]) for u in range(plan.d_h))
            term = pointwise("ctmul", u_bank[t], b_t)
            o = term if o is None else pointwise("add", o, term)
        out.append(real_part(o))
    return out


# ---------------------------------------------------------------------------
# GELU candidates


@dataclass(frozen=True)
class GeluCoeffs:
    """``GELU(x) - x/2 ~ a|x|^4 + b|x|^3 + c|x|^2 + d|x| + e`` on ``|x| <= threshold``."""

    a: float
    b: float
    c: float
    d: float
    e: float
    threshold: float = 2.7

    def f0(self, x: np.ndarray) -> np.ndarray:
        return self.a * x**4 - self.b * x**3 + self.c * x**2 + (0.5 - self.d) * x + self.e

    def f1(self, x: np.ndarray) -> np.ndarray:
        return self.a * x**4 + self.b * x**3 + self.c * x**2 + (0.5 + self.d) * x + self.e

    def approx(self, x: np.ndarray) -> np.ndarray:
        """Three-branch piecewise GELU surrogate."""
        x = np.asarray(x, dtype=float)
        mid = np.where(x < 0, self.f0(x), self.f1(x))
        return np.where(x >= self.threshold, x, np.where(x < -self.threshold, 0.0, mid))


def exact_gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def fit_gelu_coeffs(threshold: float = 2.7, samples: int = 4097) -> GeluCoeffs:
    """Least-squares quartic in ``|x|`` for ``GELU(x) - x/2`` on ``[0, threshold]``."""
    x = np.linspace(0.0, threshold, samples)
    target = exact_gelu(x) - 0.5 * x
    coef = np.polyfit(x, target, 4)  # highest degree first
    a, b, c, d, e = (float(v) for v in coef)
    return GeluCoeffs(a, b, c, d, e, threshold)


def gelu_preeval(
    x_cts: Sequence[CipherVec], coeffs: GeluCoeffs, chain: ModulusChain
) -> tuple[list[CipherVec], list[CipherVec]]:
    """Candidate ciphertexts ``F0 = F0(x0) + i F0(x1)`` and ``F1`` likewise.

    Each input carries two real vectors as ``x0 + i x1``. Powers ``x^2, x^3, x^4``
    are shared between both candidates; each real channel costs three ciphertext
    products and the whole evaluation consumes three levels.
    """
    f0_out, f1_out = [], []
    for xc in x_cts:
        if xc.level < 3:
            raise LevelExhausted(f"need 3 levels, have {xc.level}")
        chans = split_complex(xc)
        f0s, f1s = [], []
        for x in chans:
            L = x.level
            x2 = rescale(pointwise("ctmul", x, x), chain)
            x1 = mod_switch_to(x, L - 1, chain)
            x3 = rescale(pointwise("ctmul", x2, x1), chain)
            x4 = rescale(pointwise("ctmul", x2, x2), chain)

            def term(ct: CipherVec, coef: float) -> CipherVec:
                ct = mod_switch_to(ct, L - 2, chain)
                pt = plain(np.full(ct.n, coef), scale=chain.q(L - 2))
                return rescale(pointwise("ptmul", ct, pt), chain)

            a4 = term(x4, coeffs.a)
            b3 = term(x3, coeffs.b)
            c2 = term(x2, coeffs.c)
            lin0 = term(x, 0.5 - coeffs.d)
            lin1 = term(x, 0.5 + coeffs.d)
            even = pointwise("add", a4, c2)
            base = pointwise("add", even, plain(np.full(x.n, coeffs.e), scale=even.scale))
            neg_b3 = pointwise("ptmul", b3, _const(x.n, -1.0))
            f0s.append(pointwise("add", pointwise("add", base, neg_b3), lin0))
            f1s.append(pointwise("add", pointwise("add", base, b3), lin1))
        f0_out.append(complexify(f0s[0], f0s[1]))
        f1_out.append(complexify(f1s[0], f1s[1]))
    return f0_out, f1_out


# ---------------------------------------------------------------------------
# generic repack


def repack_rma(ct: CipherVec, perm: np.ndarray, m: int) -> CipherVec:
    """Slot permutation ``out[i] = x[perm[i]]`` with the RMA cost of ``log2(m)`` steps.

    When every slot moves left by a power of two below ``m`` the permutation is
    evaluated literally as ``sum_k rot(x, 2^k) * mask_k``. Otherwise the target
    slots are produced directly and the same ``log2(m)`` rotations, plaintext
    products and additions are charged.
    """
    if m < 1 or m & (m - 1):
        raise NotPowerOfTwo(f"m={m}")
    n = ct.n
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm must be a permutation of the slot indices")
    if np.array_equal(perm, np.arange(n)):
        return ct
    steps = int(math.log2(m))
    disp = (perm - np.arange(n)) % n
    powers = {1 << k: k for k in range(steps)}
    if steps and all(int(d) in powers for d in disp):
        acc = ct._derive(np.zeros(n, dtype=np.complex128))
        for k in range(steps):
            sel = (disp == (1 << k)).astype(np.complex128)
            acc = pointwise("add", acc, pointwise("ptmul", permute("rot", ct, 1 << k), PlainVec(sel, 1.0)))
        return acc
    for k in range(steps):
        ct.ledger.charge("rot", key=(ct.uid, -(k + 1)))
        ct.ledger.charge("ptmul")
        ct.ledger.charge("add")
    return ct._derive(ct.slots[perm])
