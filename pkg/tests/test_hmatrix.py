import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import random as sparse_random

from galerkin import hmatrix as hm
from galerkin.assembly import bem_dense, bem_h, regularize
from galerkin.femspace import make_fem
from galerkin.kernels import green_kernel
from galerkin.mesh import build_sphere
from galerkin.quadrature import make_domain


def _kernel_entries(P, Q, k=0.0):
    def f(i, j):
        d = np.linalg.norm(P[np.asarray(i)][:, None] - Q[np.asarray(j)][None], axis=2)
        return np.exp(1j * k * d) / d

    return f


@pytest.fixture(scope="module")
def sphere642():
    mesh = build_sphere(642)
    dom = make_domain(mesh, 3)
    V = make_fem(mesh, "P1")
    G = green_kernel("[exp(ikr)/r]", 2.0)
    tol = 1e-4
    H = bem_h(dom, dom, V, G, V, tol, leaf_size=16) / (4 * np.pi)
    A = bem_dense(dom, dom, V, G, V) / (4 * np.pi)
    R = regularize(dom, dom, V, "[1/r]", V) / (4 * np.pi)
    return H, A, R, tol


# cluster trees ------------------------------------------------------------------


def test_single_leaf_tree():
    t = hm.build_cluster_tree(np.random.default_rng(0).normal(size=(40, 3)), leaf_size=64)
    assert t.root.is_leaf and len(t.leaves()) == 1


def test_collinear_median_split():
    x = np.linspace(0, 1, 128)
    pts = np.column_stack([x[::-1], np.zeros(128), np.zeros(128)])
    t = hm.build_cluster_tree(pts, leaf_size=64)
    a, b = t.root.children
    assert a.size == b.size == 64
    assert pts[t.perm[a.lo:a.hi], 0].max() < pts[t.perm[b.lo:b.hi], 0].min()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 700), st.integers(1, 80), st.integers(0, 2**31))
def test_tree_invariants(n, leaf, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3)) * [3, 1, 0.2]
    t = hm.build_cluster_tree(pts, leaf_size=leaf)
    assert np.array_equal(np.sort(t.perm), np.arange(n))
    for nd in t.nodes():
        p = pts[t.perm[nd.lo:nd.hi]]
        assert np.all(p >= nd.box_lo) and np.all(p <= nd.box_hi)
        if nd.is_leaf:
            assert nd.size <= leaf
        else:
            a, b = nd.children
            assert a.lo == nd.lo and a.hi == b.lo and b.hi == nd.hi


def test_tree_needs_points():
    with pytest.raises(ValueError):
        hm.build_cluster_tree(np.zeros((0, 3)))


# ACA ------------------------------------------------------------------------


def test_aca_rank_one():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=30), rng.normal(size=20)
    A = np.outer(a, b)
    U, V = hm.aca(lambda i, j: A[np.ix_(i, j)], 30, 20, 1e-10)
    assert U.shape[1] == 1
    assert np.abs(U @ V.T - A).max() <= 1e-14 * np.abs(A).max()


def test_aca_zero_block():
    U, V = hm.aca(lambda i, j: np.zeros((len(i), len(j))), 12, 9, 1e-6)
    assert U.shape == (12, 0) and V.shape == (9, 0)


def test_aca_rank_five():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(60, 5)) @ rng.normal(size=(5, 45))
    calls = []

    def f(i, j):
        calls.append(len(i) * len(j))
        return A[np.ix_(i, j)]

    U, V = hm.aca(f, 60, 45, 1e-10)
    assert U.shape[1] == 5
    assert np.linalg.norm(U @ V.T - A) <= 1e-9 * np.linalg.norm(A)
    assert sum(calls) < A.size  # never evaluates the whole block


def test_aca_tol_validation():
    with pytest.raises(ValueError):
        hm.aca(lambda i, j: np.ones((len(i), len(j))), 3, 3, 0.0)


# builds -----------------------------------------------------------------------------


def test_single_leaf_equals_dense():
    mesh = build_sphere(42)
    dom = make_domain(mesh, 3)
    V = make_fem(mesh, "P1")
    G = green_kernel("[exp(ikr)/r]", 1.0)
    H = bem_h(dom, dom, V, G, V, 1e-3)
    assert len(H.leaves()) == 1 and H.leaves()[0].kind == "dense"
    assert np.array_equal(H.to_dense(), bem_dense(dom, dom, V, G, V))
    rm = H.rank_map()
    assert rm == [(0, V.n_dofs, 0, V.n_dofs, "dense", V.n_dofs)]


def test_well_separated_clusters_low_rank():
    rng = np.random.default_rng(3)
    P = rng.uniform(-0.5, 0.5, size=(300, 3))
    diam = np.linalg.norm(P.max(0) - P.min(0))
    Q = rng.uniform(-0.5, 0.5, size=(250, 3)) + [11 * diam, 0, 0]
    rt, ct = hm.build_cluster_tree(P), hm.build_cluster_tree(Q)
    assert hm.admissible(rt.root, ct.root, 1.0)
    H = hm.assemble_h(_kernel_entries(P, Q), rt, ct, 1e-6)
    (leaf,) = H.leaves()
    assert leaf.kind == "rk" and leaf.rank <= 15
    D = _kernel_entries(P, Q)(np.arange(300), np.arange(250))
    s = np.linalg.svd(D, compute_uv=False)
    assert leaf.rank <= np.count_nonzero(s > 1e-6 * s[0]) + 3
    assert np.linalg.norm(H.to_dense() - D) <= 10 * 1e-6 * np.linalg.norm(D)


def test_aca_block_error_bound():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(800, 3))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    Q = P + 0.01
    f = _kernel_entries(P, Q, 3.0)
    tol = 1e-5
    t = hm.build_cluster_tree(P, 32)
    ct = hm.build_cluster_tree(Q, 32)
    H = hm.assemble_h(f, t, ct, tol)
    n_rk = 0
    for b in H.leaves():
        if b.kind != "rk":
            continue
        n_rk += 1
        exact = f(t.perm[b.rows.lo:b.rows.hi], ct.perm[b.cols.lo:b.cols.hi])
        assert b.rank <= min(b.shape)
        assert hm.admissible(b.rows, b.cols, H.eta)
        assert np.linalg.norm(b.U @ b.V.T - exact) <= 10 * tol * np.linalg.norm(exact)
    assert n_rk > 0


def test_matvec_vs_dense_and_linearity(sphere642):
    H, A, _, tol = sphere642
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.normal(size=A.shape[1]) + 1j * rng.normal(size=A.shape[1])
        assert np.linalg.norm(H.matvec(v) - A @ v) <= 10 * tol * np.linalg.norm(A @ v)
    x, y = rng.normal(size=(2, A.shape[1]))
    a, b = 0.7 - 2j, 3.1
    lhs, rhs = H.matvec(a * x + b * y), a * H.matvec(x) + b * H.matvec(y)
    assert np.linalg.norm(lhs - rhs) <= 1e-13 * np.linalg.norm(rhs)
    X = rng.normal(size=(A.shape[1], 3))
    assert np.allclose(H @ X, np.stack([H @ X[:, i] for i in range(3)], axis=1))


def test_partition_and_rank_map(sphere642, tmp_path):
    H = sphere642[0]
    H.check_partition()
    n = H.shape[0]
    cover = np.zeros((n, n), dtype=int)
    for r0, r1, c0, c1, kind, rank in H.rank_map():
        cover[r0:r1, c0:c1] += 1
        assert kind in ("dense", "rk") and 0 <= rank <= min(r1 - r0, c1 - c0)
    assert np.all(cover == 1)
    path = tmp_path / "ranks.csv"
    H.write_rank_map(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["row_lo", "row_hi", "col_lo", "col_hi", "kind", "rank"]
    assert len(rows) == len(H.leaves()) + 1
    assert H.stored_entries() < n * n


def test_build_determinism():
    mesh = build_sphere(642)
    dom = make_domain(mesh, 3)
    V = make_fem(mesh, "P1")
    G = green_kernel("[exp(ikr)/r]", 2.0)
    a = bem_h(dom, dom, V, G, V, 1e-3)
    b = bem_h(dom, dom, V, G, V, 1e-3)
    assert a.rank_map() == b.rank_map()
    assert np.array_equal(a.to_dense(), b.to_dense())


def test_add_and_scale(sphere642):
    H, A, R, tol = sphere642
    Z = hm.add(H, -H)
    v = np.random.default_rng(6).normal(size=A.shape[1])
    assert np.linalg.norm(Z.matvec(v)) <= 1e-12 * np.linalg.norm(H.to_dense(), 2) * np.linalg.norm(v)
    S = H + R
    assert np.allclose(S.to_dense(), H.to_dense() + R.toarray(), atol=1e-14 * np.abs(A).max())
    D = (2.0 * H - H).to_dense()
    assert np.linalg.norm(D - H.to_dense()) <= 2 * tol * np.linalg.norm(H.to_dense())
    assert np.allclose(H.T.to_dense(), H.to_dense().T)


def test_mul(sphere642):
    H, _, _, tol = sphere642
    Hd = H.to_dense()
    P = hm.mul(H, H)
    P.check_partition()
    ref = Hd @ Hd
    assert np.linalg.norm(P.to_dense() - ref) <= 10 * tol * np.linalg.norm(ref)


def test_lu_identity():
    t = hm.build_cluster_tree(np.random.default_rng(7).normal(size=(300, 3)), 32)
    I = hm.identity_h(t)
    b = np.random.default_rng(8).normal(size=300)
    x = hm.solve(I.lu(), b)
    assert np.array_equal(x.real, b) and np.all(x.imag == 0)


def test_lu_product_and_solve(sphere642):
    H, A, R, tol = sphere642
    M = H + R
    L, U = M.lu()
    Md = M.to_dense()
    LU = L.to_dense() @ U.to_dense()
    assert M.shape[0] <= 1000
    assert np.linalg.norm(LU - Md) <= 10 * tol * np.linalg.norm(Md)
    b = np.random.default_rng(9).normal(size=M.shape[0]) + 0j
    x = hm.solve((L, U), b)
    assert np.linalg.norm(M.matvec(x) - b) <= 10 * tol * np.linalg.norm(b)
    xd = np.linalg.solve(A + R.toarray(), b)
    assert np.linalg.norm(x - xd) <= 100 * tol * np.linalg.norm(xd)


def test_zero_pivot():
    t = hm.build_cluster_tree(np.random.default_rng(10).normal(size=(20, 3)), 64)
    Z = hm.scale(hm.identity_h(t), 0.0)
    with pytest.raises(hm.FactorizationError):
        Z.lu()


def test_structural_mismatch(sphere642):
    H = sphere642[0]
    other = hm.identity_h(hm.build_cluster_tree(np.random.default_rng(11).normal(size=(H.shape[0], 3)), 32))
    with pytest.raises(hm.StructureError):
        hm.add(H, other)
    with pytest.raises(ValueError):
        hm.add_sparse(H, sparse_random(3, 3, 0.5))
