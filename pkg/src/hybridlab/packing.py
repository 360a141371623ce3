"""Segment layouts, metered shift algorithms, masks and boundary accounting.

A slot vector of length ``n`` is viewed as ``N_seg = n / m`` contiguous
segments of length ``m``: ``mat(x)[r, s] = x[s*m + r]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DimensionMismatch, MalformedGraph
from .slot_engine import CipherVec, PlainVec, permute, pointwise

# ---------------------------------------------------------------------------
# reshape


def mat(x: np.ndarray, m: int) -> np.ndarray:
    """Segment view: column ``s`` is segment ``s``."""
    x = np.asarray(x)
    if x.size % m:
        raise DimensionMismatch(f"length {x.size} not a multiple of m={m}")
    return x.reshape(-1, m).T


def vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M).T.reshape(-1)


# ---------------------------------------------------------------------------
# formats


@dataclass(frozen=True)
class SegmentColumn:
    n: int
    m: int
    C: int

    def __post_init__(self) -> None:
        _check_grid(self.n, self.m)
        if not 1 <= self.C <= self.n_seg:
            raise DimensionMismatch(f"C={self.C} outside [1, {self.n_seg}]")

    @property
    def n_seg(self) -> int:
        return self.n // self.m


@dataclass(frozen=True)
class FoldedDiagonal:
    n: int
    H: int
    m: int

    def __post_init__(self) -> None:
        _check_grid(self.n, self.m)
        if self.m % 2:
            raise DimensionMismatch("folded-diagonal packing needs even m")
        if self.H > self.n_seg:
            raise DimensionMismatch(f"H={self.H} heads exceed {self.n_seg} segments")

    @property
    def n_seg(self) -> int:
        return self.n // self.m


@dataclass(frozen=True)
class HeadMajor:
    n: int
    H_blk: int
    d_h: int
    m: int

    def __post_init__(self) -> None:
        _check_grid(self.n, self.m)
        if self.H_blk * self.d_h > self.n_seg:
            raise DimensionMismatch("H_blk * d_h exceeds the segment count")

    @property
    def n_seg(self) -> int:
        return self.n // self.m


PackFormat = Union[SegmentColumn, FoldedDiagonal, HeadMajor]


def _check_grid(n: int, m: int) -> None:
    if n <= 0 or n & (n - 1):
        raise DimensionMismatch(f"slot count {n} is not a power of two")
    if m <= 0 or n % m:
        raise DimensionMismatch(f"m={m} does not divide n={n}")


def k_min(n_entries: int, n: int) -> int:
    """Fewest complex ciphertexts able to hold ``n_entries`` reals."""
    if n_entries < 1:
        raise ValueError("need at least one entry")
    return -(-n_entries // (2 * n))


@dataclass(frozen=True)
class BoundaryTensor:
    logical_entries: int
    format: PackFormat
    ct_count: int

    def __post_init__(self) -> None:
        if self.ct_count < self.k_min:
            raise DimensionMismatch("fewer ciphertexts than the packing lower bound")

    @property
    def k_min(self) -> int:
        return k_min(self.logical_entries, self.format.n)

    @property
    def minimal(self) -> bool:
        return self.ct_count == self.k_min

    @property
    def excess(self) -> int:
        return self.ct_count - self.k_min


# ---------------------------------------------------------------------------
# masks


def _frozen(a: np.ndarray) -> PlainVec:
    a = a.astype(np.complex128)
    a.setflags(write=False)
    return PlainVec(a, 1.0)


@lru_cache(maxsize=None)
def seg_mask(n: int, m: int, segs: tuple[int, ...]) -> PlainVec:
    """Indicator of the listed segments."""
    M = np.zeros((m, n // m))
    M[:, list(segs)] = 1.0
    return _frozen(vec(M))


def e_seg(n: int, m: int, s: int) -> PlainVec:
    return seg_mask(n, m, (s,))


@lru_cache(maxsize=None)
def prefix_mask(n: int, lo: int, hi: int) -> PlainVec:
    """Indicator of slots ``lo <= i < hi``."""
    a = np.zeros(n)
    a[lo:hi] = 1.0
    return _frozen(a)


@lru_cache(maxsize=None)
def psi_masks(n: int, m: int, t: int) -> tuple[PlainVec, PlainVec]:
    """Row masks ``H`` (rows < m - t) and ``U`` (rows >= m - t) in every segment."""
    rows = np.arange(n) % m
    return _frozen(rows < m - t), _frozen(rows >= m - t)


def rotfirst_masks(n: int, L: int, tau: int) -> tuple[PlainVec, PlainVec]:
    return prefix_mask(n, 0, L - tau), prefix_mask(n, L - tau, L)


def channel_mask(n: int, m: int, H_blk: int, d_h: int, u: int) -> PlainVec:
    """Segments holding channel ``u`` of every local head in a head-major block."""
    return seg_mask(n, m, tuple(h * d_h + u for h in range(H_blk)))


# ---------------------------------------------------------------------------
# shifts


def phi(ct: CipherVec, delta: int, m: int) -> CipherVec:
    """Whole-segment cyclic shift by ``delta`` segments: one rotation."""
    return permute("rot", ct, (delta * m) % ct.n)


def psi(ct: CipherVec, t: int, m: int) -> CipherVec:
    """Cyclic left shift by ``t`` inside every segment."""
    t %= m
    if t == 0:
        return ct
    n = ct.n
    h, u = psi_masks(n, m, t)
    a = pointwise("ptmul", permute("rot", ct, t), h)
    b = pointwise("ptmul", permute("rot", ct, (t - m) % n), u)
    return pointwise("add", a, b)


def rot_first(ct: CipherVec, L: int, tau: int, keep_tail: bool = False) -> CipherVec:
    """Cyclic left shift by ``tau`` restricted to slots ``[0, L)``.

    Slots ``>= L`` come out zero. With ``keep_tail`` they are copied through at
    the price of one extra plaintext product and addition.
    """
    n = ct.n
    if not 1 <= L <= n:
        raise DimensionMismatch(f"L={L} outside [1, {n}]")
    tau %= L
    if L == n:
        return permute("rot", ct, tau)
    if tau == 0:
        return ct if keep_tail else pointwise("ptmul", ct, prefix_mask(n, 0, L))
    a, b = rotfirst_masks(n, L, tau)
    y1 = pointwise("ptmul", permute("rot", ct, tau), a)
    y2 = pointwise("ptmul", permute("rot", ct, (tau - L) % n), b)
    out = pointwise("add", y1, y2)
    if keep_tail:
        out = pointwise("add", out, pointwise("ptmul", ct, prefix_mask(n, L, n)))
    return out


def phi_c(ct: CipherVec, delta: int, C: int, m: int) -> CipherVec:
    """Segment shift with wrap-around inside the first ``C`` segments."""
    C = min(C, ct.n // m)
    delta %= C
    if delta == 0:
        return ct
    return rot_first(ct, C * m, delta * m)


def shift(ct: CipherVec, kind: str, amount: int, *, m: int, C: int | None = None, L: int | None = None) -> CipherVec:
    """Dispatch on ``kind`` in ``{"phi", "psi", "phi_c", "rotfirst"}``."""
    if kind == "phi":
        return phi(ct, amount, m)
    if kind == "psi":
        return psi(ct, amount, m)
    if kind == "phi_c":
        if C is None:
            raise ValueError("phi_c needs C")
        return phi_c(ct, amount, C, m)
    if kind == "rotfirst":
        if L is None:
            raise ValueError("rotfirst needs L")
        return rot_first(ct, L, amount)
    raise ValueError(f"unknown shift kind {kind!r}")


# plaintext references used by tests and oracles


def phi_ref(x: np.ndarray, delta: int, m: int) -> np.ndarray:
    return vec(np.roll(mat(x, m), -delta, axis=1))


def psi_ref(x: np.ndarray, t: int, m: int) -> np.ndarray:
    return vec(np.roll(mat(x, m), -t, axis=0))


def rot_first_ref(x: np.ndarray, L: int, tau: int) -> np.ndarray:
    out = np.zeros_like(x)
    out[:L] = np.roll(x[:L], -(tau % L))
    return out


# ---------------------------------------------------------------------------
# pack / unpack


def pack_segment_column(X: np.ndarray, fmt: SegmentColumn, complex_pairs: bool = True) -> list[np.ndarray]:
    """Column ``gC + c`` of ``X`` goes to segment ``c`` of group ``g``.

    With ``complex_pairs`` groups ``2u`` and ``2u+1`` share one vector as real
    and imaginary part, which gives ``K_min`` vectors when ``C = N_seg``.
    """
    X = np.asarray(X)
    m, d = X.shape
    if m != fmt.m:
        raise DimensionMismatch(f"row count {m} != m={fmt.m}")
    C, n = fmt.C, fmt.n
    G = -(-d // C)
    groups = []
    for g in range(G):
        M = np.zeros((m, n // m), dtype=np.complex128)
        cols = X[:, g * C : (g + 1) * C]
        M[:, : cols.shape[1]] = cols
        groups.append(vec(M))
    if not complex_pairs:
        return groups
    if np.iscomplexobj(X) and np.any(np.imag(X)):
        raise DimensionMismatch("complex pairing needs a real tensor")
    out = []
    for u in range(-(-G // 2)):
        z = groups[2 * u].copy()
        if 2 * u + 1 < G:
            z = z + 1j * groups[2 * u + 1]
        out.append(z)
    return out


def unpack_segment_column(
    vs: Sequence[np.ndarray], fmt: SegmentColumn, d: int, complex_pairs: bool = True
) -> np.ndarray:
    groups: list[np.ndarray] = []
    for v in vs:
        if complex_pairs:
            groups.extend([np.real(v), np.imag(v)])
        else:
            groups.append(np.asarray(v))
    cols = [mat(g, fmt.m)[:, : fmt.C] for g in groups]
    X = np.concatenate(cols, axis=1)
    if X.shape[1] < d:
        raise DimensionMismatch(f"only {X.shape[1]} columns present, {d} requested")
    return X[:, :d]


def diagonals(S: np.ndarray) -> np.ndarray:
    """``D[h, delta, j] = S[h, j, (j + delta) % m]``."""
    S = np.asarray(S)
    H, m, _ = S.shape
    j = np.arange(m)
    idx = (j[None, :] + j[:, None]) % m  # [delta, j]
    return S[:, j[None, :], idx]


def undiagonal(D: np.ndarray) -> np.ndarray:
    H, m, _ = D.shape
    S = np.zeros((H, m, m), dtype=D.dtype)
    j = np.arange(m)
    for delta in range(m):
        S[:, j, (j + delta) % m] = D[:, delta, :]
    return S


def folded_pairs(S: np.ndarray) -> np.ndarray:
    """``F[t, h, j] = s^h_t[j] + i s^h_{t+m/2}[j]`` for ``t < m/2``."""
    D = diagonals(S)
    half = D.shape[1] // 2
    return np.transpose(D[:, :half] + 1j * D[:, half:], (1, 0, 2))


def unfold_pairs(F: np.ndarray) -> np.ndarray:
    """Inverse of :func:`folded_pairs`."""
    D = np.concatenate([np.real(F), np.imag(F)], axis=0)  # [delta, h, j]
    return undiagonal(np.transpose(D, (1, 0, 2)))


def pack_folded_diagonal(S: np.ndarray, fmt: FoldedDiagonal, minimal: bool = True) -> list[np.ndarray]:
    """Score tensor ``S[h, j, k]`` in folded-diagonal layout.

    Without ``minimal`` returns one vector per ``t`` with head ``h`` in segment
    ``h``. With ``minimal`` the first ``H*m`` slots of each are streamed
    ``t``-major into ``K_min`` vectors and the tail is zero-padded.
    """
    S = np.asarray(S)
    if S.shape != (fmt.H, fmt.m, fmt.m):
        raise DimensionMismatch(f"expected {(fmt.H, fmt.m, fmt.m)}, got {S.shape}")
    F = folded_pairs(S)  # [t, h, j]
    if not minimal:
        out = []
        for t in range(fmt.m // 2):
            v = np.zeros(fmt.n, dtype=np.complex128)
            v[: fmt.H * fmt.m] = F[t].reshape(-1)
            out.append(v)
        return out
    return export_stream([f.reshape(-1) for f in F], fmt.n)


def unpack_folded_diagonal(vs: Sequence[np.ndarray], fmt: FoldedDiagonal, minimal: bool = True) -> np.ndarray:
    H, m, n = fmt.H, fmt.m, fmt.n
    if minimal:
        flat = np.concatenate(list(vs))[: H * m * (m // 2)]
        F = flat.reshape(m // 2, H, m)
    else:
        F = np.stack([np.asarray(v)[: H * m].reshape(H, m) for v in vs])
    return unfold_pairs(F)


def export_stream(cuts: Sequence[np.ndarray], n: int) -> list[np.ndarray]:
    """Concatenate and split into length-``n`` vectors, zero-padding the last."""
    flat = np.concatenate([np.asarray(c, dtype=np.complex128) for c in cuts])
    k = max(1, -(-flat.size // n))
    buf = np.zeros(k * n, dtype=np.complex128)
    buf[: flat.size] = flat
    return [buf[i * n : (i + 1) * n].copy() for i in range(k)]


def pack_head_major(V: np.ndarray, fmt: HeadMajor) -> list[np.ndarray]:
    """Per-head values ``V[h, :, u]`` with segment ``h~ * d_h + u`` per block."""
    V = np.asarray(V)
    H, m, d_h = V.shape
    if m != fmt.m or d_h != fmt.d_h:
        raise DimensionMismatch(f"value tensor {V.shape} does not fit {fmt}")
    out = []
    for b in range(-(-H // fmt.H_blk)):
        M = np.zeros((m, fmt.n_seg), dtype=np.complex128)
        for hl in range(fmt.H_blk):
            h = b * fmt.H_blk + hl
            if h < H:
                M[:, hl * d_h : (hl + 1) * d_h] = V[h]
        out.append(vec(M))
    return out


def unpack_head_major(vs: Sequence[np.ndarray], fmt: HeadMajor, H: int) -> np.ndarray:
    out = np.zeros((H, fmt.m, fmt.d_h), dtype=np.complex128)
    for b, v in enumerate(vs):
        M = mat(v, fmt.m)
        for hl in range(fmt.H_blk):
            h = b * fmt.H_blk + hl
            if h < H:
                out[h] = M[:, hl * fmt.d_h : (hl + 1) * fmt.d_h]
    return out


def pack_folded_head_major(P: np.ndarray, fmt: HeadMajor) -> list[np.ndarray]:
    """Attention weights for the value kernel.

    Segment ``h~ * (m/2) + t`` of block ``b`` holds ``p_t + i p_{t+m/2}`` of head
    ``b*H_blk + h~``. Requires ``d_h == m/2`` so segments line up with values.
    """
    P = np.asarray(P)
    H, m, _ = P.shape
    if fmt.d_h != m // 2:
        raise DimensionMismatch("folded weights need d_h == m/2")
    F = folded_pairs(P)  # [t, h, j]
    return pack_head_major(np.transpose(F, (1, 2, 0)), fmt)


def unpack_folded_head_major(vs: Sequence[np.ndarray], fmt: HeadMajor, H: int) -> np.ndarray:
    F = np.transpose(unpack_head_major(vs, fmt, H), (2, 0, 1))
    return unfold_pairs(F)


def pack(tensor: np.ndarray, fmt: PackFormat, **kw) -> list[np.ndarray]:
    if isinstance(fmt, SegmentColumn):
        return pack_segment_column(tensor, fmt, **kw)
    if isinstance(fmt, FoldedDiagonal):
        return pack_folded_diagonal(tensor, fmt, **kw)
    if isinstance(fmt, HeadMajor):
        return pack_head_major(tensor, fmt)
    raise TypeError(type(fmt))


def unpack(vs: Sequence[np.ndarray], fmt: PackFormat, **kw) -> np.ndarray:
    if isinstance(fmt, SegmentColumn):
        return unpack_segment_column(vs, fmt, **kw)
    if isinstance(fmt, FoldedDiagonal):
        return unpack_folded_diagonal(vs, fmt, **kw)
    if isinstance(fmt, HeadMajor):
        return unpack_head_major(vs, fmt, **kw)
    raise TypeError(type(fmt))


# ---------------------------------------------------------------------------
# stage-compatibility validator


@dataclass(frozen=True)
class StageEdge:
    """Producer -> consumer edge.

    ``kind`` is one of ``"fhe-fhe"``, ``"fhe-mpc"``, ``"mpc-fhe"``. For
    FHE->FHE edges the producer and consumer formats must agree and a mismatch
    costs ``blocks * log2(m)`` rotations. Boundary edges compare ``ct_count``
    with the packing bound for ``entries`` reals.
    """

    producer: str
    consumer: str
    kind: str
    produced: str
    expected: str
    blocks: int = 0
    entries: int = 0
    ct_count: int = 0


@dataclass
class ScpReport:
    violations: list[str]
    remap_rotations: int
    boundary_excess: int

    def to_record(self) -> dict:
        return {
            "violations": list(self.violations),
            "remap_rotations": self.remap_rotations,
            "boundary_excess": self.boundary_excess,
        }


def scp_validate(edges: Iterable[StageEdge], m: int, n: int) -> ScpReport:
    edges = list(edges)
    _check_acyclic(edges)
    log_m = int(math.log2(m))
    violations: list[str] = []
    rot = excess = 0
    for e in edges:
        if e.kind == "fhe-fhe":
            if e.produced != e.expected:
                violations.append(f"rule1:{e.producer}->{e.consumer}")
                rot += e.blocks * log_m
        elif e.kind in ("fhe-mpc", "mpc-fhe"):
            if e.entries < 1 or e.ct_count < 1:
                raise MalformedGraph(f"boundary {e.producer}->{e.consumer} lacks counts")
            extra = e.ct_count - k_min(e.entries, n)
            if extra < 0:
                raise MalformedGraph(f"boundary {e.producer}->{e.consumer} below the packing bound")
            if extra:
                rule = "rule3" if e.kind == "fhe-mpc" else "rule2"
                violations.append(f"{rule}:{e.producer}->{e.consumer}")
                excess += extra
        else:
            raise MalformedGraph(f"unknown edge kind {e.kind!r}")
    return ScpReport(violations, rot, excess)


def _check_acyclic(edges: Sequence[StageEdge]) -> None:
    succ: dict[str, list[str]] = {}
    for e in edges:
        if not e.producer or not e.consumer or e.producer == e.consumer:
            raise MalformedGraph(f"bad edge {e.producer!r}->{e.consumer!r}")
        succ.setdefault(e.producer, []).append(e.consumer)
    state: dict[str, int] = {}

    def visit(v: str) -> None:
        state[v] = 1
        for w in succ.get(v, ()):
            s = state.get(w, 0)
            if s == 1:
                raise MalformedGraph(f"cycle through {w!r}")
            if s == 0:
                visit(w)
        state[v] = 2

    for v in list(succ):
        if state.get(v, 0) == 0:
            visit(v)
