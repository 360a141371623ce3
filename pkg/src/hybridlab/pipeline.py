"""One hybrid encoder layer: CKKS linear kernels, MPC nonlinearities, four conversion pairs.

Stage order per layer::

    X -> [QK fused | V] projection -> score -> c2m -> MBMax -> m2c -> value
      -> output projection (+ X) -> c2m -> MBLN -> m2c -> FF1 -> c2m -> GELU
      -> m2c -> FF2 (+ X1) -> c2m -> MBLN -> Y

Residual additions happen in CKKS on the ciphertext that entered the block, so
every MPC block sees freshly converted values at ``F`` fractional bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import conversion as cv
from . import cost_model as cm
from . import he_kernels as hk
from . import mpc_protocols as mp
from . import packing as pk
from .errors import ConfigViolation, MissingRun
from .mpc_engine import Engine, FixedShare, Pair, Ring
from .slot_engine import (
    PHANTOM,
    PROFILES,
    CipherVec,
    ModulusChain,
    OpLedger,
    PrimitiveProfile,
    diff,
    ledger_proxy,
    mod_switch_to,
    pointwise,
    rescale,
)

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BlockParams:
    """CKKS parameters of one FHE block between two MPC blocks."""

    N_ring: int
    depth: int
    scale_bits: int


DEFAULT_BLOCKS = (
    BlockParams(32768, 10, 42),  # QKV projection, score
    BlockParams(32768, 7, 42),  # value, output projection
    BlockParams(32768, 6, 40),  # FF1, GELU candidates
    BlockParams(65536, 4, 40),  # FF2
)

# nominal multiplicative depth of each kernel
KERNEL_DEPTH = {"projection": 1, "score": 2, "value": 2, "gelu_preeval": 3}
BLOCK_KERNELS = (
    ("projection", "score"),
    ("value", "projection"),
    ("projection", "gelu_preeval"),
    ("projection",),
)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    N_L: int
    d_model: int
    H: int
    d_h: int
    d_ff: int
    m: int
    n: int = 16384
    blocks: tuple[BlockParams, ...] = DEFAULT_BLOCKS
    F: int = 13
    ell: int = 43
    gelu: str = "preeval"
    mbmax_c: float = 2.0
    mbmax_R_d: float | None = None
    causal: bool = False

    def __post_init__(self) -> None:
        if self.d_model != self.H * self.d_h:
            raise ConfigViolation(f"d_model={self.d_model} != H*d_h={self.H * self.d_h}")
        if self.gelu not in ("preeval", "mpc_poly"):
            raise ConfigViolation(f"unknown GELU variant {self.gelu!r}")
        if len(self.blocks) != 4:
            raise ConfigViolation("a layer has exactly four FHE blocks")
        if self.n % self.m or self.n & (self.n - 1):
            raise ConfigViolation("n must be a power of two divisible by m")

    @property
    def n_seg(self) -> int:
        return self.n // self.m

    @property
    def R_d(self) -> float:
        return self.mbmax_R_d if self.mbmax_R_d is not None else self.m * self.mbmax_c**5

    @property
    def mbmax(self) -> mp.MBMaxParams:
        return mp.MBMaxParams(self.mbmax_c, self.R_d)

    def to_record(self) -> dict[str, object]:
        rec = asdict(self)
        rec["blocks"] = [asdict(b) for b in self.blocks]
        return rec


PRESETS: dict[str, ModelConfig] = {
    "bert-base": ModelConfig("bert-base", 12, 768, 12, 64, 3072, 128),
    "bert-large": ModelConfig("bert-large", 24, 1024, 16, 64, 4096, 128),
    "gpt2-base": ModelConfig("gpt2-base", 12, 768, 12, 64, 3072, 64),
    "tiny": ModelConfig("tiny", 1, 16, 2, 8, 32, 8, n=128),
}


def load_config(source: str | Path | Mapping[str, object]) -> ModelConfig:
    """Preset name, JSON file, or mapping with an optional ``preset`` base and overrides."""
    if isinstance(source, Mapping):
        doc = dict(source)
    elif str(source) in PRESETS:
        return PRESETS[str(source)]
    else:
        doc = json.loads(Path(source).read_text())
    base = PRESETS[str(doc.pop("preset", "tiny"))]
    if "blocks" in doc:
        doc["blocks"] = tuple(BlockParams(**b) for b in doc["blocks"])  # type: ignore[arg-type]
    allowed = set(ModelConfig.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigViolation(f"unknown config keys {sorted(unknown)}")
    return replace(base, **doc)


# ---------------------------------------------------------------------------
# weights and plaintext reference


@dataclass(frozen=True)
class LayerWeights:
    WQ: np.ndarray
    WK: np.ndarray
    WV: np.ndarray
    WO: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    ln1: mp.MBLNParams
    ln2: mp.MBLNParams


def random_weights(cfg: ModelConfig, rng: np.random.Generator) -> LayerWeights:
    d, f = cfg.d_model, cfg.d_ff

    def w(a: int, b: int, extra: float = 1.0) -> np.ndarray:
        return rng.standard_normal((a, b)) * extra / math.sqrt(a)

    def ln() -> mp.MBLNParams:
        return mp.MBLNParams(rng.uniform(0.8, 1.2, d), rng.uniform(-0.1, 0.1, d))

    return LayerWeights(
        WQ=w(d, d, 1 / math.sqrt(cfg.d_h)),
        WK=w(d, d),
        WV=w(d, d),
        WO=w(d, d),
        W1=w(d, f),
        W2=w(f, d),
        ln1=ln(),
        ln2=ln(),
    )


def heads(X: np.ndarray, H: int, d_h: int) -> np.ndarray:
    """``(m, H*d_h) -> (H, m, d_h)``."""
    return np.transpose(X.reshape(X.shape[0], H, d_h), (1, 0, 2))


def merge_heads(A: np.ndarray) -> np.ndarray:
    H, m, d_h = A.shape
    return np.transpose(A, (1, 0, 2)).reshape(m, H * d_h)


def plaintext_reference(cfg: ModelConfig, W: LayerWeights, X: np.ndarray) -> np.ndarray:
    """Double-precision surrogate layer."""
    coeffs = hk.fit_gelu_coeffs()
    X = np.asarray(X, dtype=float)
    Q, K, V = X @ W.WQ, X @ W.WK, X @ W.WV
    S = heads(Q, cfg.H, cfg.d_h) @ np.transpose(heads(K, cfg.H, cfg.d_h), (0, 2, 1))
    P = cfg.mbmax.apply(S)
    A = merge_heads(P @ heads(V, cfg.H, cfg.d_h))
    X1 = W.ln1.apply(A @ W.WO + X)
    Hh = coeffs.approx(X1 @ W.W1)
    return W.ln2.apply(Hh @ W.W2 + X1)


def calibrate_norms(cfg: ModelConfig, W: LayerWeights, X: np.ndarray) -> LayerWeights:
    """Fit the fixed scales of random weights to the activations seen on ``X``.

    The surrogate normalization does not divide by a data-dependent deviation
    and the power map grows fast, so stacked random layers drift in magnitude.
    ``WQ`` is shrunk until every score lies in ``[-1, 1]`` and each
    normalization's ``l`` is set to the largest row spread it sees.
    """
    coeffs = hk.fit_gelu_coeffs()
    X = np.asarray(X, dtype=float)

    def spread(Z: np.ndarray) -> float:
        return float(np.max(np.std(Z, axis=-1))) or 1.0

    def scores(WQ: np.ndarray) -> np.ndarray:
        return heads(X @ WQ, cfg.H, cfg.d_h) @ np.transpose(heads(X @ W.WK, cfg.H, cfg.d_h), (0, 2, 1))

    WQ = W.WQ / max(1.0, float(np.max(np.abs(scores(W.WQ)))))
    S = scores(WQ)
    V = X @ W.WV
    Z1 = merge_heads(cfg.mbmax.apply(S) @ heads(V, cfg.H, cfg.d_h)) @ W.WO + X
    ln1 = replace(W.ln1, l=spread(Z1))
    X1 = ln1.apply(Z1)
    Z2 = coeffs.approx(X1 @ W.W1) @ W.W2 + X1
    return replace(W, WQ=WQ, ln1=ln1, ln2=replace(W.ln2, l=spread(Z2)))


# ---------------------------------------------------------------------------
# share layouts


def layout_index(pack_fn: Callable[[np.ndarray], list[np.ndarray]], shape: tuple[int, ...]) -> np.ndarray:
    """``[K, 2, n]`` source index of every real/imaginary slot; ``-1`` is padding."""
    idx = np.arange(1, math.prod(shape) + 1, dtype=np.float64).reshape(shape)
    vs = pack_fn(idx)
    out = np.stack([np.stack([np.rint(v.real), np.rint(v.imag)]) for v in vs]).astype(np.int64) - 1
    return out


def gather(pair: Pair, index: np.ndarray) -> list[tuple[Pair, Pair]]:
    """Arrange a shared tensor into per-ciphertext real/imaginary slot shares."""
    out = []
    for k in range(index.shape[0]):
        parts = []
        for c in range(2):
            idx = index[k, c]
            live = idx >= 0
            shares = []
            for s in pair:
                flat = s.values.reshape(-1)
                v = np.zeros(idx.shape, dtype=np.uint64)
                v[live] = flat[idx[live]]
                shares.append(FixedShare(s.party, v, s.frac_bits, s.ring))
            parts.append(tuple(shares))
        out.append(tuple(parts))
    return out


def scatter(slot_pairs: Sequence[tuple[Pair, Pair]], index: np.ndarray, shape: tuple[int, ...]) -> Pair:
    """Inverse of :func:`gather`."""
    size = math.prod(shape)
    ring = slot_pairs[0][0][0].ring
    F = slot_pairs[0][0][0].frac_bits
    bufs = [np.zeros(size, dtype=np.uint64), np.zeros(size, dtype=np.uint64)]
    for k, (re, im) in enumerate(slot_pairs):
        for c, part in enumerate((re, im)):
            idx = index[k, c]
            live = idx >= 0
            for p in range(2):
                bufs[p][idx[live]] = part[p].values[live]
    return tuple(FixedShare(p, bufs[p].reshape(shape), F, ring) for p in range(2))  # type: ignore[return-value]


def _complex_pairs(cts: Sequence[CipherVec]) -> list[CipherVec]:
    return [hk.complexify(cts[i], cts[i + 1] if i + 1 < len(cts) else None) for i in range(0, len(cts), 2)]


def _spend(cts: Sequence[CipherVec], levels: int, chain: ModulusChain) -> list[CipherVec]:
    """Account ``levels`` of depth: rescale products, drop primes otherwise."""
    out = []
    for ct in cts:
        for _ in range(levels):
            if ct.scale > 1.5 * chain.target_scale:
                ct = rescale(ct, chain)
            else:
                ct = mod_switch_to(ct, ct.level - 1, chain)
        out.append(ct)
    return out


# ---------------------------------------------------------------------------
# plans


@dataclass
class LayerPlans:
    seg: pk.SegmentColumn
    qk: hk.ProjectionPlan
    v: hk.ProjectionPlan
    score: hk.ScorePlan
    value: hk.ValuePlan
    out: hk.ProjectionPlan
    ff1: hk.ProjectionPlan
    ff2: hk.ProjectionPlan


def score_C(cfg: ModelConfig) -> int:
    """Largest multiple of ``H`` that fits the segment grid."""
    return max(cfg.H, (cfg.n_seg // cfg.H) * cfg.H) if cfg.H <= cfg.n_seg else cfg.n_seg


def out_row_map(plan: hk.ValuePlan, H: int, d_h: int) -> np.ndarray:
    hm = hk.head_major_map(H, d_h, plan.H_blk, plan.stride)
    width = plan.H_blk * plan.stride
    n_seg = plan.n // plan.m
    rows = np.full(plan.B_V * n_seg, -1, dtype=np.int64)
    for b in range(plan.B_V):
        rows[b * n_seg : b * n_seg + width] = hm[b * width : (b + 1) * width]
    return rows


def build_plans(cfg: ModelConfig, W: LayerWeights) -> LayerPlans:
    n, m, H, d_h = cfg.n, cfg.m, cfg.H, cfg.d_h
    C_s = score_C(cfg)
    vplan = hk.ValuePlan.build(n, m, H, d_h)
    return LayerPlans(
        seg=pk.SegmentColumn(n, m, cfg.n_seg),
        qk=hk.ProjectionPlan.build(W.WQ + 1j * W.WK, m, n, cfg.n_seg, C_s, col_map=hk.pi_s(H, d_h)),
        v=hk.ProjectionPlan.build(
            W.WV,
            m,
            n,
            cfg.n_seg,
            vplan.H_blk * vplan.stride,
            col_map=hk.head_major_map(H, d_h, vplan.H_blk, vplan.stride),
        ),
        score=hk.ScorePlan.build(n, m, H, d_h, C_s),
        value=vplan,
        out=hk.ProjectionPlan.build(W.WO, m, n, cfg.n_seg, cfg.n_seg, row_map=out_row_map(vplan, H, d_h)),
        ff1=hk.ProjectionPlan.build(W.W1, m, n, cfg.n_seg, cfg.n_seg),
        ff2=hk.ProjectionPlan.build(W.W2, m, n, cfg.n_seg, cfg.n_seg),
    )


def pack_attention_weights(P: np.ndarray, plan: hk.ValuePlan) -> list[np.ndarray]:
    """Folded weights in the value kernel's head-major layout, padded to the stride."""
    Fd = pk.folded_pairs(P)  # [t, h, j]
    H, m = P.shape[0], P.shape[1]
    T = np.zeros((H, m, plan.stride), dtype=np.complex128)
    T[:, :, : m // 2] = np.transpose(Fd, (1, 2, 0))
    return pk.pack_head_major(T, plan.fmt)


# ---------------------------------------------------------------------------
# boundary accounting

MPC_BLOCKS = ("softmax", "ln1", "gelu", "ln2")


def boundary_counts(cfg: ModelConfig, gelu: str | None = None, complex_mode: bool = True) -> dict[str, dict[str, int]]:
    """Ciphertexts per MPC block: ``in`` enters MPC, ``out`` leaves it."""
    gelu = cfg.gelu if gelu is None else gelu
    f = 1 if complex_mode else 2

    def k(entries: int) -> int:
        return f * pk.k_min(entries, cfg.n)

    att = k(cfg.H * cfg.m * cfg.m)
    act = k(cfg.m * cfg.d_model)
    ff = k(cfg.m * cfg.d_ff)
    g_in = 3 * ff if gelu == "preeval" else ff
    return {
        "softmax": {"in": att, "out": att},
        "ln1": {"in": act, "out": act},
        "gelu": {"in": g_in, "out": ff},
        "ln2": {"in": act, "out": act},
    }


def total_boundary(counts: Mapping[str, Mapping[str, int]]) -> int:
    return sum(v["in"] + v["out"] for v in counts.values())


TABLE4_REFERENCE = {
    "Minimal": {"softmax": (6, 6), "ln1": (3, 3), "gelu": (12, 12), "ln2": (3, 3), "total": 48},
    "BOLT": {"softmax": (12, 12), "ln1": (6, 6), "gelu": (24, 24), "ln2": (6, 6), "total": 96},
    "BLB": {"softmax": (12, 12), "within_softmax": (12, 12), "ln1": (6, 6), "gelu": (72, 24), "ln2": (6, 6), "total": 168},
    "Preeval": {"softmax": (6, 6), "ln1": (3, 3), "gelu": (36, 12), "ln2": (3, 3), "total": 72},
}


# ---------------------------------------------------------------------------
# layer execution


@dataclass
class LayerReport:
    config: str
    flags: dict[str, object]
    stage_ops: dict[str, dict[str, int]]
    ledger: dict[str, int]
    rounds: dict[str, int]
    transcript: dict[str, dict[str, int]]
    boundary: dict[str, dict[str, int]]
    conversion_pairs: int
    payload_bytes: int
    payload_cts: int
    depth_audit: list[dict[str, int]]
    overlay: dict[str, float]
    max_abs_error: float
    L_conv: int
    output: np.ndarray = field(repr=False)

    def to_record(self) -> dict[str, object]:
        rec = asdict(self)
        rec.pop("output")
        return rec


@dataclass
class _Run:
    cfg: ModelConfig
    conv: cv.ConversionConfig
    eng: Engine
    ledger: OpLedger
    log: cv.ConversionLog
    seed: int
    counter: int = 0
    boundary: dict[str, dict[str, int]] = field(default_factory=lambda: {b: {"in": 0, "out": 0} for b in MPC_BLOCKS})
    stages: dict[str, dict[str, int]] = field(default_factory=dict)
    audit: list[dict[str, int]] = field(default_factory=list)
    _mark: dict[str, int] = field(default_factory=dict)

    @property
    def frac_cap(self) -> int:
        """Share precision the next conversion can absorb."""
        return int(math.log2(self.conv.delta))

    def stage(self, name: str) -> None:
        now = self.ledger.snapshot()
        if self._mark:
            prev = self.stages.get(name, {})
            d = diff(now, self._mark)
            self.stages[name] = {k: prev.get(k, 0) + d.get(k, 0) for k in set(prev) | set(d)}
        self._mark = now

    def to_mpc(self, block: str, cts: Sequence[CipherVec], index: np.ndarray, shape: tuple[int, ...]) -> Pair:
        parts = []
        for ct in cts:
            ct = cv.trim(ct, self.conv)
            self.counter += 1
            parts.append(cv.c2m_complex(ct, self.conv, self.eng, self.seed * 100_003 + self.counter, self.log, block))
        self.boundary[block]["in"] += len(cts)
        return scatter(parts, index, shape)

    def to_fhe(self, block: str, pair: Pair, index: np.ndarray, level: int) -> list[CipherVec]:
        cts = [
            cv.m2c_complex(re, im, self.conv, self.eng, self.ledger, level, self.log, block)
            for re, im in gather(pair, index)
        ]
        self.boundary[block]["out"] += len(cts)
        return cts

    def spend(self, block: int, start: int, cts: Sequence[CipherVec], kernel: str, chain: ModulusChain) -> list[CipherVec]:
        out = _spend(cts, KERNEL_DEPTH[kernel], chain)
        self.audit.append({"block": block, "kernel": kernel, "start": start, "level": out[0].level})  # type: ignore[dict-item]
        return out


def layer_chain(cfg: ModelConfig) -> ModulusChain:
    """One chain for the whole layer: deepest block budget at the smallest block scale."""
    return ModulusChain.generate(max(b.depth for b in cfg.blocks), min(b.scale_bits for b in cfg.blocks))


def depth_audit(cfg: ModelConfig, L_conv: int) -> list[dict[str, int]]:
    """Levels left after each block's kernels; raises if a block overruns its budget."""
    rows = []
    for i, (bp, kernels) in enumerate(zip(cfg.blocks, BLOCK_KERNELS)):
        used = sum(KERNEL_DEPTH[k] for k in kernels if k != "gelu_preeval" or cfg.gelu == "preeval")
        left = bp.depth - used
        if left < L_conv:
            raise ConfigViolation(f"block {i + 1} needs {used} levels plus L_conv={L_conv}, budget {bp.depth}")
        rows.append({"block": i + 1, "depth": bp.depth, "used": used, "left": left})
    return rows


def run_layer(
    cfg: ModelConfig,
    X: np.ndarray | Pair,
    W: LayerWeights,
    *,
    scp: bool = True,
    complex_conv: bool = True,
    gelu: str | None = None,
    seed: int = 0,
    fhe_profile: PrimitiveProfile = PHANTOM,
    eng: Engine | None = None,
    reference: np.ndarray | None = None,
) -> tuple[LayerReport, Pair]:
    """Execute one layer on shares of ``X``; returns the report and shares of the output."""
    gelu = cfg.gelu if gelu is None else gelu
    if not scp:
        raise ConfigViolation("the executed pipeline keeps stage-compatible layouts; use ablate() for w/o SCP")
    if cfg.causal:
        raise ConfigViolation("causal masking is not implemented in the folded-diagonal layout")
    if not complex_conv:
        raise ConfigViolation("the executed pipeline always converts in complex mode; use ablate() for real mode")
    n, m, H, d_h, d, f = cfg.n, cfg.m, cfg.H, cfg.d_h, cfg.d_model, cfg.d_ff
    eng = eng or Engine(Ring(cfg.ell, cfg.F), seed=seed)
    if not isinstance(X, tuple):
        X_ref = np.asarray(X, dtype=float)
        X = eng.share(X_ref)
    chain = layer_chain(cfg)
    conv = cv.ConversionConfig(chain, ell=cfg.ell, F=cfg.F, delta=int(chain.target_scale))
    depth_audit(cfg, conv.L_conv)
    ledger = OpLedger(cfg.name)
    run = _Run(cfg, conv, eng, ledger, cv.ConversionLog(), seed)
    plans = build_plans(cfg, W)
    coeffs = hk.fit_gelu_coeffs()
    lv = [b.depth for b in cfg.blocks]

    seg_d = layout_index(lambda t: pk.pack_segment_column(t, plans.seg), (m, d))
    seg_f = layout_index(lambda t: pk.pack_segment_column(t, plans.seg), (m, f))
    att_out = layout_index(lambda t: pk.pack_folded_diagonal(t, pk.FoldedDiagonal(n, H, m)), (H, m, m))
    att_in = layout_index(lambda t: pack_attention_weights(t, plans.value), (H, m, m))

    run.stage("start")
    # previous layer's LN2 return leg
    x_cts = run.to_fhe("ln2", X, seg_d, lv[0])
    run.stage("m2c")

    # block 1: fused QK, V, score
    qk = run.spend(1, lv[0], hk.project(x_cts, plans.qk), "projection", chain)
    v_cts = run.spend(1, lv[0], hk.project(x_cts, plans.v), "projection", chain)
    run.stage("qkv_projection")
    q_cts, k_cts = [], []
    for z in qk:
        q, k = hk.split_complex(z)
        q_cts.append(q)
        k_cts.append(k)
    scores = hk.score_kernel(q_cts, k_cts, plans.score).stream
    scores = run.spend(1, qk[0].level, scores, "score", chain)
    run.stage("score")

    # softmax
    S = run.to_mpc("softmax", scores, att_out, (H, m, m))
    with eng.transcript.protocol("softmax"):
        P = mp.mbmax(eng, S, cfg.mbmax, run.frac_cap)
    p_cts = run.to_fhe("softmax", P, att_in, lv[1])
    run.stage("softmax")

    # block 2: value, output projection, residual
    v_cts = [mod_switch_to(v, lv[1], chain) for v in v_cts]
    run.stage("value")
    o_blocks = run.spend(2, lv[1], hk.value_kernel(p_cts, v_cts, plans.value), "value", chain)
    run.stage("value")
    o_in = _complex_pairs(o_blocks)
    o_cts = run.spend(2, o_blocks[0].level, hk.project(o_in, plans.out), "projection", chain)
    o_cts = _complex_pairs(o_cts)
    o_cts = [pointwise("add", o, mod_switch_to(x, o.level, chain)) for o, x in zip(o_cts, x_cts)]
    run.stage("out_projection")

    # LN1
    Z = run.to_mpc("ln1", o_cts, seg_d, (m, d))
    with eng.transcript.protocol("ln1"):
        X1 = mp.mbln(eng, Z, W.ln1, run.frac_cap)
    x1_cts = run.to_fhe("ln1", X1, seg_d, lv[2])
    run.stage("ln1")

    # block 3: FF1 and optional candidates
    g_cts = _complex_pairs(run.spend(3, lv[2], hk.project(x1_cts, plans.ff1), "projection", chain))
    run.stage("ff1")
    if gelu == "preeval":
        f0_cts, f1_cts = hk.gelu_preeval(g_cts, coeffs, chain)
        run.audit.append({"block": 3, "kernel": "gelu_preeval", "start": g_cts[0].level, "level": f0_cts[0].level})  # type: ignore[dict-item]
        run.stage("gelu_preeval")
        G = run.to_mpc("gelu", g_cts, seg_f, (m, f))
        F0 = run.to_mpc("gelu", f0_cts, seg_f, (m, f))
        F1 = run.to_mpc("gelu", f1_cts, seg_f, (m, f))
        with eng.transcript.protocol("gelu"):
            Hs = mp.gelu_protocol(eng, "preeval", G, coeffs, F0, F1)
    else:
        G = run.to_mpc("gelu", g_cts, seg_f, (m, f))
        with eng.transcript.protocol("gelu"):
            Hs = mp.gelu_protocol(eng, "mpc_poly", G, coeffs)
    h_cts = run.to_fhe("gelu", Hs, seg_f, lv[3])
    run.stage("gelu")

    # block 4: FF2, residual
    y_cts = _complex_pairs(run.spend(4, lv[3], hk.project(h_cts, plans.ff2), "projection", chain))
    y_cts = [pointwise("add", y, mod_switch_to(x1, y.level, chain)) for y, x1 in zip(y_cts, x1_cts)]
    run.stage("ff2")

    # LN2
    Z2 = run.to_mpc("ln2", y_cts, seg_d, (m, d))
    with eng.transcript.protocol("ln2"):
        Y = mp.mbln(eng, Z2, W.ln2, run.frac_cap)
    run.stage("ln2")

    out = eng.reconstruct(Y)
    err = float(np.max(np.abs(out - reference))) if reference is not None else float("nan")
    rounds = {name: rec["rounds"] for name, rec in eng.transcript.to_record().items()}
    compute = ledger_proxy(ledger, fhe_profile, keyswitch_only=False)
    trips = run.log.c2m_cts + run.log.m2c_cts
    overlay = {
        net.name: cm.overlay_latency(
            compute, eng.transcript.rounds, eng.transcript.total_bytes, run.log.total_bytes, net, trips
        )
        for net in cm.NETWORKS.values()
    }
    report = LayerReport(
        config=cfg.name,
        flags={"scp": scp, "complex_conv": complex_conv, "gelu": gelu, "seed": seed, "fhe_profile": fhe_profile.name},
        stage_ops={k: dict(sorted(v.items())) for k, v in run.stages.items()},
        ledger=dict(sorted(ledger.counts.items())),
        rounds=rounds,
        transcript=eng.transcript.to_record(),
        boundary=run.boundary,
        conversion_pairs=sum(1 for b in MPC_BLOCKS if run.boundary[b]["in"] and run.boundary[b]["out"]),
        payload_bytes=run.log.total_bytes,
        payload_cts=trips,
        depth_audit=depth_audit(cfg, conv.L_conv),
        overlay=overlay,
        max_abs_error=err,
        L_conv=conv.L_conv,
        output=out,
    )
    return report, Y
