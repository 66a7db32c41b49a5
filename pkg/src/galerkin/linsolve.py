"""Iterative and eigenvalue solvers used by the demos."""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csc_matrix, issparse
from scipy.sparse.linalg import LinearOperator, aslinearoperator, eigsh

logger = logging.getLogger(__name__)


class BreakdownError(ArithmeticError):
    """Krylov breakdown; the exception carries the last iterate in ``x``."""

    def __init__(self, msg, x):
        super().__init__(msg)
        self.x = x


class EigenError(ArithmeticError):
    pass


class KrylovResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual_history: list
    converged: bool


def as_operator(A) -> LinearOperator:
    """Wrap a dense array, sparse matrix, HMatrix or LinearOperator."""
    if isinstance(A, LinearOperator):
        return A
    if isinstance(A, tuple):
        from .hmatrix import solve

        n = A[0].shape[0]
        return LinearOperator((n, n), matvec=lambda v: solve(A, v), dtype=complex)
    return aslinearoperator(A)


def gmres(A, b, tol: float = 1e-6, restart: int = 50, maxit: int = 1000, M=None,
          x0=None) -> KrylovResult:
    """Restarted GMRES with Givens rotations and right preconditioning.

    Parameters
    ----------
    A : matrix-like
        Anything accepted by ``as_operator``.
    b : (N,) array_like
    tol : float
        Target relative residual ||b - A x|| / ||b||.
    restart : int
        Krylov dimension between restarts.
    maxit : int
        Maximum total number of inner iterations.
    M : matrix-like, optional
        Right preconditioner (an approximation of A^-1).

    Returns
    -------
    KrylovResult
        ``residual_history`` starts with the initial relative residual and
        has one entry per iteration.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    A = as_operator(A)
    P = as_operator(M) if M is not None else None
    b = np.asarray(b)
    dtype = np.result_type(A.dtype, b.dtype, float if P is None else P.dtype)
    n = len(b)
    x = np.zeros(n, dtype) if x0 is None else np.array(x0, dtype=dtype)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return KrylovResult(np.zeros(n, dtype), 0, [0.0], True)
    r = b - A.matvec(x)
    beta = np.linalg.norm(r)
    history = [beta / bnorm]
    it = 0
    while history[-1] > tol and it < maxit:
        m = min(restart, maxit - it)
        Q = np.zeros((m + 1, n), dtype)
        H = np.zeros((m + 1, m), dtype)
        cs = np.zeros(m, dtype)
        sn = np.zeros(m, dtype)
        g = np.zeros(m + 1, dtype)
        g[0] = beta
        Q[0] = r / beta
        k = 0
        for j in range(m):
            w = A.matvec(P.matvec(Q[j]) if P is not None else Q[j])
            # modified Gram-Schmidt, twice for stability
            for _ in range(2):
                for i in range(j + 1):
                    h = np.vdot(Q[i], w)
                    H[i, j] += h
                    w = w - h * Q[i]
            hn = np.linalg.norm(w)
            H[j + 1, j] = hn
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -np.conj(sn[i]) * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            a, c = H[j, j], H[j + 1, j]
            den = np.sqrt(abs(a) ** 2 + abs(c) ** 2)
            if den == 0:
                raise BreakdownError("GMRES breakdown: singular Hessenberg matrix", x)
            cs[j] = abs(a) / den if a != 0 else 0.0
            sn[j] = (a / abs(a) if a != 0 else 1.0) * np.conj(c) / den
            H[j, j] = cs[j] * a + sn[j] * c
            H[j + 1, j] = 0.0
            g[j + 1] = -np.conj(sn[j]) * g[j]
            g[j] = cs[j] * g[j]
            it += 1
            k = j + 1
            history.append(abs(g[j + 1]) / bnorm)
            if history[-1] <= tol or hn == 0:
                break
            Q[j + 1] = w / hn
        y = sla.solve_triangular(H[:k, :k], g[:k])
        dx = Q[:k].T @ y
        x = x + (P.matvec(dx) if P is not None else dx)
        r = b - A.matvec(x)
        beta = np.linalg.norm(r)
        # the recurrence can drift from the true residual; keep the true one
        history[-1] = beta / bnorm
        if not np.isfinite(beta):
            raise BreakdownError("GMRES breakdown: non-finite residual", x)
        if hn == 0 and history[-1] > tol:
            raise BreakdownError("GMRES breakdown: Krylov space exhausted before convergence", x)
    converged = history[-1] <= tol
    if not converged:
        logger.warning("gmres: no convergence after %d iterations (residual %.3g)", it, history[-1])
    return KrylovResult(x, it, history, converged)


def cg(A, b, tol: float = 1e-6, maxit: int = 1000, x0=None) -> KrylovResult:
    """Conjugate gradients for Hermitian positive definite A."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    A = as_operator(A)
    b = np.asarray(b)
    dtype = np.result_type(A.dtype, b.dtype, float)
    x = np.zeros(len(b), dtype) if x0 is None else np.array(x0, dtype=dtype)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return KrylovResult(x * 0, 0, [0.0], True)
    r = b - A.matvec(x)
    p = r.copy()
    rr = np.vdot(r, r).real
    history = [np.sqrt(rr) / bnorm]
    it = 0
    while history[-1] > tol and it < maxit:
        Ap = A.matvec(p)
        pAp = np.vdot(p, Ap).real
        if not pAp > 0:
            raise BreakdownError("CG breakdown: operator is not positive definite", x)
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = np.vdot(r, r).real
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        history.append(np.sqrt(rr) / bnorm)
    converged = history[-1] <= tol
    if not converged:
        logger.warning("cg: no convergence after %d iterations (residual %.3g)", it, history[-1])
    return KrylovResult(x, it, history, converged)


def lu_solve_dense(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense LU with partial pivoting."""
    return sla.lu_solve(sla.lu_factor(A), b)


def eig_smallest_generalized(K, M, n_eig: int, tol: float = 1e-8):
    """Smallest eigenpairs of K v = lambda M v for sparse SPD K and M.

    Shift-invert Lanczos around 0 (ARPACK with a sparse LU of K).

    Returns
    -------
    values : (n_eig,) ndarray, ascending
    vectors : (N, n_eig) ndarray, M-orthonormal
    """
    K = csc_matrix(K) if issparse(K) else csc_matrix(np.asarray(K))
    M = csc_matrix(M) if issparse(M) else csc_matrix(np.asarray(M))
    n = K.shape[0]
    if K.shape != (n, n) or M.shape != (n, n):
        raise ValueError("K and M must be square of the same size")
    if not 1 <= n_eig <= n:
        raise ValueError(f"n_eig must lie in [1, {n}]")
    if n_eig >= n - 1 or n <= 50:
        # too small for ARPACK
        vals, vecs = sla.eigh(K.toarray(), M.toarray())
        vals, vecs = vals[:n_eig], vecs[:, :n_eig]
    else:
        try:
            vals, vecs = eigsh(K, k=n_eig, M=M, sigma=0.0, which="LM", tol=0)
        except RuntimeError as exc:
            raise EigenError(f"shift-invert factorization failed: {exc}") from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    # normalize in the M inner product
    G = vecs.T @ (M @ vecs)
    vecs = vecs / np.sqrt(np.abs(np.diag(G)))
    Kv = K @ vecs
    res = np.linalg.norm(Kv - (M @ vecs) * vals, axis=0) / np.linalg.norm(Kv, axis=0)
    if np.any(res > tol):
        raise EigenError(f"eigenpair residuals {res.max():.3g} exceed {tol}")
    return vals, vecs
