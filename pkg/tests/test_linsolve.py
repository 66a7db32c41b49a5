import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import diags, identity

from galerkin.assembly import integral
from galerkin.femspace import grad, make_fem
from galerkin.linsolve import (BreakdownError, EigenError, as_operator, cg, eig_smallest_generalized, gmres,
                               lu_solve_dense)
from galerkin.mesh import build_disk
from galerkin.quadrature import make_domain


@pytest.fixture(scope="module")
def disk_system():
    mesh = build_disk(1000)
    dom = make_domain(mesh, 3)
    V = make_fem(mesh, "P1")
    A = integral(dom, grad(V), grad(V)) + integral(dom, V, V)
    F = integral(dom, V, lambda X: X[:, 0] ** 2)
    return A, F


@pytest.mark.parametrize("solver", [gmres, cg])
def test_identity_one_iteration(solver):
    b = np.arange(1.0, 8.0)
    res = solver(identity(7), b)
    assert res.iterations == 1 and res.converged
    assert np.allclose(res.x, b, rtol=1e-15)


@pytest.mark.parametrize("solver", [gmres, cg])
def test_diagonal(solver):
    res = solver(diags(np.arange(1.0, 11.0)), np.ones(10), tol=1e-10)
    assert np.allclose(res.x, 1 / np.arange(1.0, 11.0), rtol=1e-9)


@pytest.mark.parametrize("solver", [gmres, cg])
def test_fem_system(solver, disk_system):
    A, F = disk_system
    res = solver(A, F, tol=1e-6)
    assert res.converged and res.iterations > 1
    assert np.linalg.norm(A @ res.x - F) <= 1e-6 * np.linalg.norm(F)


def test_gmres_history_nonincreasing_across_restarts():
    rng = np.random.default_rng(0)
    n = 120
    A = np.eye(n) * 4 + rng.normal(size=(n, n)) / np.sqrt(n)
    b = rng.normal(size=n)
    res = gmres(A, b, tol=1e-10, restart=7)
    assert res.converged
    h = np.array(res.residual_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert len(h) == res.iterations + 1
    assert np.linalg.norm(A @ res.x - b) <= 1e-10 * np.linalg.norm(b)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_gmres_complex_random(seed, n):
    rng = np.random.default_rng(seed)
    A = np.eye(n) * 3 + (rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))) / np.sqrt(n)
    b = rng.normal(size=n) + 1j * rng.normal(size=n)
    res = gmres(A, b, tol=1e-8, restart=10)
    assert res.converged
    assert np.linalg.norm(A @ res.x - b) <= 1e-8 * np.linalg.norm(b)


def test_gmres_preconditioner():
    d = np.linspace(1, 1e4, 200)
    A = diags(d) + diags(np.full(199, 0.5), 1)
    b = np.ones(200)
    plain = gmres(A, b, tol=1e-8, restart=20)
    prec = gmres(A, b, tol=1e-8, restart=20, M=diags(1 / d))
    assert prec.converged and prec.iterations < plain.iterations


def test_gmres_nonconvergence_reported():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(60, 60))
    res = gmres(A, rng.normal(size=60), tol=1e-12, restart=3, maxit=6)
    assert not res.converged and res.iterations == 6


def test_tol_validation_and_zero_rhs():
    with pytest.raises(ValueError):
        gmres(np.eye(2), np.ones(2), tol=0)
    with pytest.raises(ValueError):
        cg(np.eye(2), np.ones(2), tol=-1)
    res = gmres(np.eye(3), np.zeros(3))
    assert res.converged and np.all(res.x == 0)


def test_breakdowns():
    with pytest.raises(BreakdownError) as exc:
        cg(np.diag([1.0, -1.0]), np.array([1.0, 1.0]))
    assert exc.value.x.shape == (2,)
    with pytest.raises(BreakdownError):
        gmres(np.zeros((3, 3)), np.ones(3))


def test_operator_linearity():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(9, 9))
    op = as_operator(A)
    x, y = rng.normal(size=(2, 9))
    assert np.allclose(op.matvec(2 * x - 3 * y), 2 * op.matvec(x) - 3 * op.matvec(y), rtol=1e-13)


def test_dense_lu():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(30, 30))
    b = rng.normal(size=30)
    assert np.allclose(A @ lu_solve_dense(A, b), b)


def test_eig_trivial_cases():
    vals, _ = eig_smallest_generalized(identity(5), identity(5), 3)
    assert np.allclose(vals, 1)
    vals, _ = eig_smallest_generalized(diags([1.0, 2.0, 3.0]), identity(3), 2)
    assert np.allclose(vals, [1, 2])


def test_eig_laplacian_1d():
    n = 400
    h = 1 / (n + 1)
    K = diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h
    M = diags([np.ones(n - 1), 4 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) * h / 6
    vals, vecs = eig_smallest_generalized(K, M, 6)
    assert np.all(np.diff(vals) > 0)
    assert np.allclose(vals, (np.pi * np.arange(1, 7)) ** 2, rtol=1e-3)
    G = vecs.T @ (M @ vecs)
    assert np.abs(G - np.eye(6)).max() <= 1e-10
    res = np.linalg.norm(K @ vecs - (M @ vecs) * vals, axis=0) / np.linalg.norm(K @ vecs, axis=0)
    assert res.max() <= 1e-8


def test_eig_errors():
    with pytest.raises(ValueError):
        eig_smallest_generalized(identity(3), identity(4), 1)
    with pytest.raises(ValueError):
        eig_smallest_generalized(identity(3), identity(3), 0)
    assert issubclass(EigenError, ArithmeticError)
