import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridlab import he_kernels as hk
from hybridlab import packing as pk
from hybridlab import pipeline as pl
from hybridlab import slot_engine as se
from hybridlab.errors import LevelExhausted, OddSequenceLength, PlanShapeMismatch

TOL = 1e-9


def enc(v, led, level=5):
    return se.encrypt(v, led, level=level, scale=2.0**40)


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def project_case(seed, m, n, d_in, d_out, complex_w, C=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, d_in))
    W = rng.standard_normal((d_in, d_out))
    if complex_w:
        W = W + 1j * rng.standard_normal((d_in, d_out))
    plan = hk.ProjectionPlan.build(W, m, n, C)
    led = se.OpLedger()
    xs = [enc(v, led) for v in pk.pack_segment_column(X, pk.SegmentColumn(n, m, plan.C))]
    ys = hk.project(xs, plan)
    Y = pk.unpack_segment_column([y.slots for y in ys], pk.SegmentColumn(n, m, plan.c_out), d_out, complex_pairs=False)
    return Y, X @ W, led, plan


@given(
    st.sampled_from([2, 4, 8]),
    st.sampled_from([1, 2, 4]),
    st.integers(1, 3),
    st.booleans(),
    st.integers(0, 2**31),
)
def test_projection_matches_matmul(m, H, widen, complex_w, seed):
    n = 32 * m
    d = H * 4
    Y, R, _, _ = project_case(seed, m, n, d, d * widen, complex_w)
    assert rel(Y, R) <= TOL


def test_projection_with_fewer_active_segments_and_conj_count():
    Y, R, led, plan = project_case(3, 8, 256, 40, 24, complex_w=False, C=12)
    assert rel(Y, R) <= TOL
    assert plan.C == 12 and plan.B_out == 2
    assert led["conj"] == plan.B_out


def test_projection_rejects_bad_plans():
    with pytest.raises(PlanShapeMismatch):
        hk.ProjectionPlan.build(np.ones((4, 4)), 4, 64, C=32)
    with pytest.raises(PlanShapeMismatch):
        hk.ProjectionPlan.build(np.ones((4, 4)), 4, 64, C=8, N1=3)
    plan = hk.ProjectionPlan.build(np.ones((4, 4)), 4, 64)
    with pytest.raises(PlanShapeMismatch):
        hk.project([], plan)


def score_case(seed, m, H, d_h, n, C=None):
    rng = np.random.default_rng(seed)
    d = H * d_h
    Q, K = rng.standard_normal((m, d)), rng.standard_normal((m, d))
    plan = hk.ScorePlan.build(n, m, H, d_h, C=C)
    fmt = pk.SegmentColumn(n, m, plan.C)
    perm = hk.pi_s(H, d_h)
    led = se.OpLedger()
    qc = [enc(v, led) for v in pk.pack_segment_column(Q[:, perm], fmt, complex_pairs=False)]
    kc = [enc(v, led) for v in pk.pack_segment_column(K[:, perm], fmt, complex_pairs=False)]
    out = hk.score_kernel(qc, kc, plan)
    S = pk.unpack_folded_diagonal([c.slots for c in out.stream], out.fmt).real
    ref = np.stack([Q[:, h * d_h : (h + 1) * d_h] @ K[:, h * d_h : (h + 1) * d_h].T for h in range(H)])
    return S, ref, out, plan


@given(st.sampled_from([2, 4, 8]), st.sampled_from([1, 2, 4]), st.sampled_from([2, 4]), st.integers(0, 2**31))
def test_score_kernel_matches_per_head_products(m, H, d_h, seed):
    S, ref, out, plan = score_case(seed, m, H, d_h, 16 * m)
    assert rel(S, ref) <= TOL
    assert len(out.stream) == pk.k_min(H * m * m, plan.n)


@given(st.sampled_from([3, 5, 6, 7]), st.integers(0, 2**31))
def test_score_kernel_with_head_phases(C, seed):
    # C not a multiple of H exercises the per-phase alignment
    S, ref, _, plan = score_case(seed, 8, 4, 4, 128, C=C)
    assert rel(S, ref) <= TOL
    assert plan.blocks == -(-16 // C)


def test_score_plan_validation():
    with pytest.raises(OddSequenceLength):
        hk.ScorePlan.build(64, 3, 1, 2)
    with pytest.raises(PlanShapeMismatch):
        hk.ScorePlan(64, 8, 1, 2, 8, 3)
    plan = hk.ScorePlan.build(16384, 128, 12, 64, C=120, beta=16)
    assert (plan.blocks, plan.g) == (7, 8)


def value_case(seed, m, H, d_h, n):
    rng = np.random.default_rng(seed)
    P, V = rng.random((H, m, m)), rng.standard_normal((H, m, d_h))
    plan = hk.ValuePlan.build(n, m, H, d_h)
    led = se.OpLedger()
    Vpad = np.zeros((H, m, plan.stride))
    Vpad[:, :, :d_h] = V
    vc = [enc(v, led) for v in pk.pack_head_major(Vpad, plan.fmt)]
    pc = [enc(v, led) for v in pl.pack_attention_weights(P, plan)]
    oc = hk.value_kernel(pc, vc, plan)
    O = pk.unpack_head_major([c.slots for c in oc], plan.fmt, H)[:, :, :d_h].real
    return O, P @ V, led, plan


@given(st.sampled_from([2, 4, 8]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
def test_value_kernel_matches_per_head_products(m, H, d_h, seed):
    O, ref, led, plan = value_case(seed, m, H, d_h, 16 * m)
    assert rel(O, ref) <= TOL
    assert led["ctmul"] == plan.B_V * (m // 2)


def test_value_plan_blocks():
    plan = hk.ValuePlan.build(16384, 128, 12, 64)
    assert plan.H_blk == 2 and plan.B_V == 6
    with pytest.raises(PlanShapeMismatch):
        hk.ValuePlan.build(64, 8, 1, 16)


def test_complexify_split_roundtrip():
    led = se.OpLedger()
    a, b = enc(np.array([1.0, 2.0]), led), enc(np.array([3.0, -4.0]), led)
    z = hk.complexify(a, b)
    np.testing.assert_allclose(z.slots, [1 + 3j, 2 - 4j])
    re, im = hk.split_complex(z)
    np.testing.assert_allclose(re.slots, [1, 2], atol=1e-15)
    np.testing.assert_allclose(im.slots, [3, -4], atol=1e-15)


def test_gelu_fit_is_close_to_gelu():
    c = hk.fit_gelu_coeffs()
    x = np.linspace(-6, 6, 2001)
    assert np.max(np.abs(c.approx(x) - hk.exact_gelu(x))) < 0.02
    # outside the threshold the surrogate is exact: 0 on the left, x on the right
    assert c.approx(np.array([-5.0]))[0] == 0.0
    assert c.approx(np.array([5.0]))[0] == 5.0


@given(st.integers(0, 2**31))
def test_gelu_preeval_candidates(seed):
    rng = np.random.default_rng(seed)
    chain = se.ModulusChain.generate(4)
    coeffs = hk.fit_gelu_coeffs()
    x0, x1 = rng.uniform(-3, 3, 32), rng.uniform(-3, 3, 32)
    led = se.OpLedger()
    ct = se.encrypt(x0 + 1j * x1, led, level=4, scale=chain.target_scale)
    f0, f1 = hk.gelu_preeval([ct], coeffs, chain)
    np.testing.assert_allclose(f0[0].slots, coeffs.f0(x0) + 1j * coeffs.f0(x1), atol=1e-9)
    np.testing.assert_allclose(f1[0].slots, coeffs.f1(x0) + 1j * coeffs.f1(x1), atol=1e-9)
    assert f0[0].level == 1
    assert f0[0].scale == pytest.approx(chain.target_scale, rel=1e-2)
    assert led["ctmul"] == 6


def test_gelu_preeval_needs_three_levels():
    chain = se.ModulusChain.generate(4)
    ct = se.encrypt(np.zeros(4), se.OpLedger(), level=2, scale=chain.target_scale)
    with pytest.raises(LevelExhausted):
        hk.gelu_preeval([ct], hk.fit_gelu_coeffs(), chain)


def test_repack_literal_power_of_two_shifts():
    n, m = 16, 4
    x = np.arange(n) + 0j
    perm = (np.arange(n) + 2) % n
    led = se.OpLedger()
    out = hk.repack_rma(enc(x, led), perm, m)
    np.testing.assert_allclose(out.slots, x[perm])
    assert led["rot"] == 2 and led["ptmul"] == 2


@given(st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**31))
def test_repack_generic_costs_log_m(m, seed):
    n = 64
    perm = np.random.default_rng(seed).permutation(n)
    x = np.arange(n) + 0j
    led = se.OpLedger()
    out = hk.repack_rma(enc(x, led), perm, m)
    np.testing.assert_allclose(out.slots, x[perm])
    if not np.array_equal(perm, np.arange(n)):
        assert led["rot"] <= int(np.log2(m))


def test_repack_rejects_non_permutation():
    with pytest.raises(ValueError):
        hk.repack_rma(enc(np.zeros(4), se.OpLedger()), np.array([0, 0, 1, 2]), 2)
