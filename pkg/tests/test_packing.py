import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridlab import packing as pk
from hybridlab import slot_engine as se
from hybridlab.errors import DimensionMismatch, MalformedGraph

grids = st.sampled_from([(16, 4), (32, 4), (32, 8), (64, 8), (64, 16)])


def enc(v, led):
    return se.encrypt(v, led, level=2, scale=2.0**40)


def test_mat_vec_roundtrip_and_segment_view():
    x = np.arange(12)
    M = pk.mat(x, 4)
    assert M.shape == (4, 3)
    np.testing.assert_array_equal(M[:, 1], [4, 5, 6, 7])
    np.testing.assert_array_equal(pk.vec(M), x)
    with pytest.raises(DimensionMismatch):
        pk.mat(np.arange(10), 4)


@given(grids, st.integers(0, 40), st.integers(0, 2**31))
def test_phi_matches_reference_with_one_rotation(grid, delta, seed):
    n, m = grid
    x = np.random.default_rng(seed).standard_normal(n) + 0j
    led = se.OpLedger()
    out = pk.phi(enc(x, led), delta, m)
    np.testing.assert_allclose(out.slots, pk.phi_ref(x, delta, m))
    assert led["rot"] == (0 if (delta * m) % n == 0 else 1)


@given(grids, st.integers(0, 40), st.integers(0, 2**31))
def test_psi_matches_reference_with_two_rotations(grid, t, seed):
    n, m = grid
    x = np.random.default_rng(seed).standard_normal(n) + 0j
    led = se.OpLedger()
    out = pk.psi(enc(x, led), t, m)
    np.testing.assert_allclose(out.slots, pk.psi_ref(x, t, m))
    if t % m:
        assert led["rot"] == 2 and led["ptmul"] == 2 and led["add"] == 1
    else:
        assert led["rot"] == 0


@given(st.data())
def test_rot_first_matches_reference(data):
    n = data.draw(st.sampled_from([16, 32, 64]))
    L = data.draw(st.integers(1, n))
    tau = data.draw(st.integers(0, 3 * n))
    x = np.arange(n) + 1j
    out = pk.rot_first(enc(x, se.OpLedger()), L, tau)
    np.testing.assert_allclose(out.slots, pk.rot_first_ref(x, L, tau))


def test_rot_first_keep_tail_copies_tail():
    x = np.arange(16) + 0j
    out = pk.rot_first(enc(x, se.OpLedger()), 8, 3, keep_tail=True)
    np.testing.assert_allclose(out.slots[:8], np.roll(x[:8], -3))
    np.testing.assert_allclose(out.slots[8:], x[8:])


@given(grids, st.integers(1, 8), st.integers(0, 20))
def test_phi_c_cycles_first_C_segments(grid, C, delta):
    n, m = grid
    C = min(C, n // m)
    x = np.arange(n) + 0j
    out = pk.phi_c(enc(x, se.OpLedger()), delta, C, m)
    M, R = pk.mat(x, m), pk.mat(out.slots, m)
    np.testing.assert_allclose(R[:, :C], np.roll(M[:, :C], -delta, axis=1))


def test_shift_dispatch_and_errors():
    ct = enc(np.arange(16) + 0j, se.OpLedger())
    np.testing.assert_allclose(pk.shift(ct, "psi", 1, m=4).slots, pk.psi_ref(ct.slots, 1, 4))
    with pytest.raises(ValueError):
        pk.shift(ct, "phi_c", 1, m=4)
    with pytest.raises(ValueError):
        pk.shift(ct, "nope", 1, m=4)


@given(st.integers(1, 40), st.sampled_from([(64, 8), (128, 8), (64, 4)]), st.booleans(), st.integers(0, 2**31))
def test_segment_column_roundtrip(d, grid, pairs, seed):
    n, m = grid
    C = n // m
    X = np.random.default_rng(seed).standard_normal((m, d))
    fmt = pk.SegmentColumn(n, m, C)
    vs = pk.pack_segment_column(X, fmt, complex_pairs=pairs)
    np.testing.assert_allclose(pk.unpack_segment_column(vs, fmt, d, complex_pairs=pairs), X)
    if pairs:
        assert len(vs) == pk.k_min(m * d, n)


@given(st.sampled_from([(64, 1, 4), (64, 2, 8), (128, 4, 8), (256, 3, 16)]), st.booleans(), st.integers(0, 2**31))
def test_folded_diagonal_roundtrip(shape, minimal, seed):
    n, H, m = shape
    S = np.random.default_rng(seed).standard_normal((H, m, m))
    fmt = pk.FoldedDiagonal(n, H, m)
    vs = pk.pack_folded_diagonal(S, fmt, minimal=minimal)
    np.testing.assert_allclose(pk.unpack_folded_diagonal(vs, fmt, minimal=minimal).real, S)
    if minimal:
        assert len(vs) == pk.k_min(H * m * m, n)
    else:
        assert len(vs) == m // 2


def test_diagonals_hand_example():
    S = np.array([[[1, 2], [3, 4]]])
    D = pk.diagonals(S)
    np.testing.assert_array_equal(D[0, 0], [1, 4])
    np.testing.assert_array_equal(D[0, 1], [2, 3])
    np.testing.assert_array_equal(pk.undiagonal(D), S)


@given(st.integers(0, 2**31))
def test_head_major_roundtrips(seed):
    rng = np.random.default_rng(seed)
    fmt = pk.HeadMajor(256, 2, 4, 8)
    V = rng.standard_normal((3, 8, 4))
    np.testing.assert_allclose(pk.unpack_head_major(pk.pack_head_major(V, fmt), fmt, 3).real, V)
    P = rng.standard_normal((3, 8, 8))
    np.testing.assert_allclose(pk.unpack_folded_head_major(pk.pack_folded_head_major(P, fmt), fmt, 3).real, P)


def test_k_min_and_boundary_tensor():
    assert pk.k_min(1, 16) == 1
    assert pk.k_min(32, 16) == 1
    assert pk.k_min(33, 16) == 2
    assert pk.k_min(128 * 768, 16384) == 3
    fmt = pk.SegmentColumn(16384, 128, 128)
    bt = pk.BoundaryTensor(128 * 3072, fmt, 36)
    assert bt.k_min == 12 and bt.excess == 24 and not bt.minimal
    with pytest.raises(DimensionMismatch):
        pk.BoundaryTensor(128 * 768, fmt, 2)


def test_format_validation():
    with pytest.raises(DimensionMismatch):
        pk.SegmentColumn(100, 10, 1)
    with pytest.raises(DimensionMismatch):
        pk.FoldedDiagonal(64, 2, 7)
    with pytest.raises(DimensionMismatch):
        pk.HeadMajor(64, 4, 4, 8)


def test_scp_validate_counts_remaps_and_excess():
    edges = [
        pk.StageEdge("qkv", "score", "fhe-fhe", "segcol", "segcol", blocks=12),
        pk.StageEdge("value", "out", "fhe-fhe", "headmajor", "segcol", blocks=6),
        pk.StageEdge("ff1", "gelu", "fhe-mpc", "segcol", "segcol", entries=128 * 3072, ct_count=36),
        pk.StageEdge("gelu", "ff2", "mpc-fhe", "segcol", "segcol", entries=128 * 3072, ct_count=12),
    ]
    rep = pk.scp_validate(edges, m=128, n=16384)
    assert rep.remap_rotations == 6 * 7
    assert rep.boundary_excess == 24
    assert rep.violations == ["rule1:value->out", "rule3:ff1->gelu"]


def test_scp_validate_rejects_cycles_and_missing_counts():
    with pytest.raises(MalformedGraph):
        pk.scp_validate([pk.StageEdge("a", "b", "fhe-fhe", "x", "x"), pk.StageEdge("b", "a", "fhe-fhe", "x", "x")], 4, 16)
    with pytest.raises(MalformedGraph):
        pk.scp_validate([pk.StageEdge("a", "b", "fhe-mpc", "x", "x")], 4, 16)
