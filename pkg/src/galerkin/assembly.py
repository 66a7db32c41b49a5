"""Galerkin assembly as products of sparse evaluation matrices.

FEM forms are assembled as ``B^T W C`` (summed over components for vector
operators), BEM double integrals as ``Phi^T Wx G Wy Psi`` with the kernel
matrix ``G`` evaluated between quadrature points, and radiation matrices as
``G Wy Psi``.  ``regularize`` returns the sparse correction replacing the
Gauss-Gauss value of the 1/r singular part by a semi-analytic one on nearby
element pairs.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, diags
from scipy.spatial import cKDTree

from .femspace import FemSpace, UnsupportedOperationError, eval_matrix, local_basis
from .kernels import Kernel, SingularEvaluationError, evaluate_masked, scene_epsilon, triangle_integrals
from .mesh import Mesh
from .quadrature import Domain, integrate

logger = logging.getLogger(__name__)

DEFAULT_MEMORY_CAP = 8e9  # bytes for the quadrature-level kernel matrix
CHUNK_BYTES = 128 * 2**20
NEAR_FACTOR = 3.0
SELF_RULE = (10, 12, 3)  # radial points, tangential points, grading power

LEVI_CIVITA = [(0, 1, 2, 1.0), (1, 2, 0, 1.0), (2, 0, 1, 1.0),
               (0, 2, 1, -1.0), (2, 1, 0, -1.0), (1, 0, 2, -1.0)]


class DenseTooLargeError(MemoryError):
    """The dense BEM matrix would exceed the memory cap."""


# kernels ---------------------------------------------------------------------


class _KernelSet:
    """Scalar kernel components with masked evaluation.

    Accepts a Kernel (scalar or full gradient), a callable ``G(X, Y)``, or a
    sequence of three of those for a vector kernel.
    """

    def __init__(self, kernel):
        if isinstance(kernel, Kernel):
            self.items = kernel.components()
        elif callable(kernel):
            self.items = [kernel]
        elif isinstance(kernel, (list, tuple)) and len(kernel) == 3:
            self.items = [k for k in kernel]
            for k in self.items:
                if isinstance(k, Kernel) and k.component == -1:
                    raise ValueError("vector kernel entries must be scalar kernels")
        else:
            raise TypeError("kernel must be a Kernel, a callable G(X, Y) or a sequence of three")
        self.n = len(self.items)

    def block(self, b, X, Y, eps):
        k = self.items[b]
        if isinstance(k, Kernel):
            return evaluate_masked(k, X, Y, eps)[0]
        G = np.asarray(k(X, Y), dtype=complex)
        if G.shape != (len(X), len(Y)):
            raise ValueError(f"kernel returned shape {G.shape}, expected {(len(X), len(Y))}")
        return G

    @property
    def is_builtin(self):
        return all(isinstance(k, Kernel) for k in self.items)


def contraction_terms(n_test: int, n_kernel: int, n_trial: int):
    """(coef, test component, kernel component, trial component) products.

    A scalar kernel pairs matching test/trial components.  A 3-component
    kernel K gives a . (K x b) between vector test a and vector trial b, and
    a plain dot product when one side is scalar.
    """
    if n_kernel == 1:
        if n_test != n_trial:
            raise ValueError(f"test has {n_test} components but trial has {n_trial}")
        return [(1.0, a, 0, a) for a in range(n_test)]
    if n_test == 3 and n_trial == 3:
        return [(s, a, b, c) for a, b, c, s in LEVI_CIVITA]
    if n_test == 3 and n_trial == 1:
        return [(1.0, a, a, 0) for a in range(3)]
    if n_test == 1 and n_trial == 3:
        return [(1.0, 0, c, c) for c in range(3)]
    raise ValueError("a vector kernel needs a vector test or trial space")


# FEM -------------------------------------------------------------------------


def _check_space(space, dom, role):
    if not isinstance(space, FemSpace):
        raise TypeError(f"{role} must be a FemSpace")
    if dom.mesh is not space.mesh:
        # trace on a sub-mesh; parent_elements raises if it is not one
        try:
            space.mesh.parent_elements(dom.mesh)
        except ValueError as exc:
            raise ValueError(f"{role} space does not live on the domain mesh: {exc}") from None


def bilinear_weighted(dom: Domain, test: FemSpace, f, trial: FemSpace) -> csr_matrix:
    """Sparse matrix sum_k w_k f(x_k) (op phi_i)(x_k) . (op psi_j)(x_k)."""
    _check_space(test, dom, "test")
    _check_space(trial, dom, "trial")
    B = eval_matrix(test, dom)
    C = eval_matrix(trial, dom)
    if B.n_components != C.n_components:
        raise ValueError(f"test has {B.n_components} components but trial has {C.n_components}")
    qs = dom.quadrature()
    w = qs.weights
    if f is not None:
        fv = np.asarray(f(qs.points))
        if fv.shape != (len(qs),):
            raise ValueError(f"coefficient returned shape {fv.shape}, expected ({len(qs)},)")
        w = w * fv
    W = diags(w)
    A = B[0].T @ W @ C[0]
    for c in range(1, B.n_components):
        A = A + B[c].T @ W @ C[c]
    A = csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


def bilinear(dom: Domain, test: FemSpace, trial: FemSpace) -> csr_matrix:
    """Sparse Galerkin matrix B^T W C (component-summed for vector operators)."""
    return bilinear_weighted(dom, test, None, trial)


def linear(dom: Domain, space: FemSpace, f) -> np.ndarray:
    """Vector sum_k w_k f(x_k) . (op phi_i)(x_k).

    ``f`` is a vectorized function of an (M, 3) batch for scalar spaces, or a
    sequence of three such functions for vector spaces.
    """
    _check_space(space, dom, "test")
    B = eval_matrix(space, dom)
    qs = dom.quadrature()
    fs = list(f) if isinstance(f, (list, tuple)) else [f]
    if len(fs) != B.n_components:
        raise ValueError(f"space has {B.n_components} components but {len(fs)} function(s) were given")
    out = None
    for c, fc in enumerate(fs):
        v = np.asarray(fc(qs.points))
        if v.shape != (len(qs),):
            raise ValueError(f"function returned shape {v.shape}, expected ({len(qs)},)")
        term = B[c].T @ (qs.weights * v)
        out = term if out is None else out + term
    return out


# BEM -------------------------------------------------------------------------


def _weighted_components(space, dom):
    E = eval_matrix(space, dom)
    W = diags(dom.quadrature().weights)
    return [csr_matrix(W @ c) for c in E]


def bem_dense(dom_x: Domain, dom_y: Domain, test: FemSpace, kernel, trial: FemSpace,
              memory_cap: float | None = None) -> np.ndarray:
    """Dense BEM matrix Phi^T Wx G Wy Psi.

    The kernel matrix is evaluated in row chunks and never stored whole;
    pairs of coincident quadrature points contribute 0.

    Raises
    ------
    DenseTooLargeError
        If the quadrature-level kernel matrix would exceed ``memory_cap``
        bytes (default 8e9); use the compressed variant instead.
    """
    _check_space(test, dom_x, "test")
    _check_space(trial, dom_y, "trial")
    ks = _KernelSet(kernel)
    Phi = _weighted_components(test, dom_x)
    Psi = _weighted_components(trial, dom_y)
    terms = contraction_terms(len(Phi), ks.n, len(Psi))
    X = dom_x.quadrature().points
    Y = dom_y.quadrature().points
    cap = DEFAULT_MEMORY_CAP if memory_cap is None else memory_cap
    need = 16.0 * len(X) * len(Y)
    if need > cap:
        raise DenseTooLargeError(
            f"dense BEM needs about {need / 1e9:.1f} GB for the {len(X)} x {len(Y)} kernel matrix "
            f"(cap {cap / 1e9:.1f} GB); pass a tolerance to build a compressed H-matrix instead")
    eps = _guard(dom_x, dom_y, X, Y)
    A = np.zeros((test.n_dofs, trial.n_dofs), dtype=complex)
    step = max(1, int(CHUNK_BYTES // (16 * max(len(Y), 1))))
    PsiT = [p.T.tocsr() for p in Psi]
    for lo in range(0, len(X), step):
        hi = min(lo + step, len(X))
        PhiT = [p[lo:hi].T.tocsr() for p in Phi]
        for b in range(ks.n):
            G = ks.block(b, X[lo:hi], Y, eps)
            for coef, a, kb, c in terms:
                if kb != b:
                    continue
                GPsi = (PsiT[c] @ G.T).T  # (chunk, Ny)
                A += coef * (PhiT[a] @ GPsi)
    return A


def radiation(points: np.ndarray, dom_y: Domain, kernel, trial: FemSpace, tol: float | None = None, **hopts):
    """Collocation matrix C[i, j] = sum_l G(x_i, y_l) w_l psi_j(y_l).

    Scalar kernel with scalar trial, or vector kernel with vector trial
    (dot product), give a (P, N) matrix.  With ``tol`` the result is an
    H-matrix.

    Raises
    ------
    SingularEvaluationError
        If a point coincides with a quadrature point; use
        ``regularize_radiation`` for points on the surface.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    _check_space(trial, dom_y, "trial")
    ks = _KernelSet(kernel)
    Psi = _weighted_components(trial, dom_y)
    if ks.n != len(Psi) and not (ks.n == 1 or len(Psi) == 1):
        raise ValueError("kernel and trial components do not contract")
    if ks.n == 1 and len(Psi) == 3 or ks.n == 3 and len(Psi) == 1:
        raise ValueError("radiation of a vector field is only defined as a dot product with a vector kernel")
    Y = dom_y.quadrature().points
    if len(points) == 0:
        return np.zeros((0, trial.n_dofs), dtype=complex)
    eps = scene_epsilon(points, Y)
    d, _ = cKDTree(Y).query(points, k=1)
    if np.any(d < eps):
        i = int(np.argmin(d))
        raise SingularEvaluationError(
            f"observation point {i} coincides with a quadrature point; use regularize_radiation")
    if tol is not None:
        from .hmatrix import build_radiation_h

        return build_radiation_h(points, dom_y, ks, trial, tol, eps, **hopts)
    C = np.zeros((len(points), trial.n_dofs), dtype=complex)
    step = max(1, int(CHUNK_BYTES // (16 * max(len(Y), 1))))
    PsiT = [p.T.tocsr() for p in Psi]
    for lo in range(0, len(points), step):
        hi = min(lo + step, len(points))
        for b in range(ks.n):
            G = ks.block(b, points[lo:hi], Y, eps)
            C[lo:hi] += (PsiT[b if len(Psi) == 3 else 0] @ G.T).T
    return C


def radiation_adjoint(dom_x: Domain, points: np.ndarray, test: FemSpace, kernel, tol: float | None = None):
    """Matrix B[i, j] = sum_k phi_i(x_k) w_k G(x_k, y_j), shape (N, P)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if isinstance(kernel, Kernel) and not kernel.is_gradient:
        # the scalar Green kernels are symmetric in x and y
        C = radiation(points, dom_x, kernel, test, tol)
        return C.T if tol is None else C.transpose()
    ks = _KernelSet(kernel)
    swapped = [(lambda X, Y, k=k: ks.block(i, Y, X, scene_epsilon(X, Y)).T) for i, k in enumerate(ks.items)]
    C = radiation(points, dom_x, swapped if ks.n == 3 else swapped[0], test, tol)
    return C.T if tol is None else C.transpose()


def bem_h(dom_x: Domain, dom_y: Domain, test: FemSpace, kernel, trial: FemSpace, tol: float, **hopts):
    """H-matrix approximation of ``bem_dense`` to relative accuracy ``tol``."""
    if not 0 < tol < 1:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    _check_space(test, dom_x, "test")
    _check_space(trial, dom_y, "trial")
    from .hmatrix import build_bem_h

    return build_bem_h(dom_x, dom_y, test, _KernelSet(kernel), trial, tol, **hopts)


def integral(*args, tol: float | None = None, **kwargs):
    """Dispatch on the call shape.

    ``integral(dom, f)``                       number (or array) int f
    ``integral(dom, V, f)``                    vector int f phi_i
    ``integral(dom, V, W)``                    sparse matrix int phi_i psi_j
    ``integral(dom, V, f, W)``                 sparse matrix int f phi_i psi_j
    ``integral(domx, domy, V, G, W[, tol])``   BEM matrix (dense or H)
    ``integral(points, domy, G, W[, tol])``    radiation matrix (P, N)
    ``integral(domx, points, V, G[, tol])``    adjoint radiation matrix (N, P)

    The leftmost space always indexes rows.
    """
    if len(args) >= 5 and isinstance(args[-1], (int, float, np.floating)) and tol is None:
        args, tol = args[:-1], float(args[-1])
    n = len(args)
    a0 = args[0]
    if isinstance(a0, Domain):
        if n == 2:
            return integrate(a0, args[1])
        if n == 3 and isinstance(args[1], FemSpace) and isinstance(args[2], FemSpace):
            return bilinear(a0, args[1], args[2])
        if n == 3 and isinstance(args[1], FemSpace):
            return linear(a0, args[1], args[2])
        if n == 4 and isinstance(args[1], FemSpace) and isinstance(args[3], FemSpace):
            return bilinear_weighted(a0, args[1], args[2], args[3])
        if n == 5 and isinstance(args[1], Domain):
            if tol is None:
                return bem_dense(a0, *args[1:], **kwargs)
            return bem_h(a0, *args[1:], tol=tol, **kwargs)
        if n == 4 and isinstance(args[2], FemSpace):
            return radiation_adjoint(a0, args[1], args[2], args[3], tol)
    elif n == 4 and isinstance(args[1], Domain):
        return radiation(a0, args[1], args[2], args[3], tol, **kwargs)
    raise TypeError("unrecognized integral call shape")


# regularization ----------------------------------------------------------------


def graded_self_rule(n_s: int = SELF_RULE[0], n_t: int = SELF_RULE[1], power: int = SELF_RULE[2]):
    """Barycentric points and weights (summing to 1) graded toward edges and vertices.

    The triangle is split at its centroid; each piece is mapped from the
    square with an algebraic grading toward the outer edge and a smooth
    grading toward both of its ends.  Used to integrate the log-singular
    edge behaviour of a triangle's own Newton potential.
    """
    xs, ws = np.polynomial.legendre.leggauss(n_s)
    xs, ws = 0.5 * (xs + 1), 0.5 * ws
    xt, wt = np.polynomial.legendre.leggauss(n_t)
    xt, wt = 0.5 * (xt + 1), 0.5 * wt
    s = 1.0 - xs**power
    ds = power * xs ** (power - 1) * ws
    t = xt**2 * (3 - 2 * xt)
    dt = 6 * xt * (1 - xt) * wt
    c = np.full(3, 1.0 / 3.0)
    V = np.eye(3)
    lam, w = [], []
    for i in range(3):
        a, b = V[(i + 1) % 3], V[(i + 2) % 3]
        edge = (1 - t)[:, None] * a + t[:, None] * b  # (n_t, 3)
        pts = c + s[:, None, None] * (edge[None, :, :] - c)
        lam.append(pts.reshape(-1, 3))
        w.append((2.0 / 3.0) * (s * ds)[:, None] * dt[None, :])
    return np.vstack(lam), np.concatenate([x.ravel() for x in w])


def _guard(dom_x, dom_y, X, Y):
    """Coincidence guard; falls back to the mesh size for one-point scenes."""
    return max(scene_epsilon(X, Y), 1e-12 * max(dom_x.mesh.diameter, dom_y.mesh.diameter))


def _near_pairs(cx, rx, cy, ry, factor=NEAR_FACTOR):
    """Element pairs with centroid distance <= factor * max(circumradius)."""
    if len(cx) == 0 or len(cy) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    radius = factor * max(rx.max(), ry.max())
    tx, ty = cKDTree(cx), cKDTree(cy)
    S = tx.sparse_distance_matrix(ty, radius, output_type="coo_matrix")
    ex, ey = S.row.astype(np.int64), S.col.astype(np.int64)
    d = np.linalg.norm(cx[ex] - cy[ey], axis=1)
    keep = d <= factor * np.maximum(rx[ex], ry[ey])
    ex, ey = ex[keep], ey[keep]
    # sparse_distance_matrix drops exact zeros (coincident centroids)
    zero_x, zero_y = _coincident_centroids(cx, cy)
    if len(zero_x):
        ex = np.concatenate([ex, zero_x])
        ey = np.concatenate([ey, zero_y])
        order = np.lexsort((ey, ex))
        pairs = np.unique(np.stack([ex[order], ey[order]], axis=1), axis=0)
        ex, ey = pairs[:, 0], pairs[:, 1]
    return ex, ey


def _coincident_centroids(cx, cy):
    d, j = cKDTree(cy).query(cx, k=1)
    i = np.flatnonzero(d == 0.0)
    return i.astype(np.int64), j[i].astype(np.int64)


class _TrialIntegrals:
    """Semi-analytic and Gauss y-integrals of the singular part against trial functions.

    For each record (an x point paired with a y element) both methods give
    an array (R, n_loc_y, n_out): the trial-side factor that is then dotted
    with the test values at x.
    """

    def __init__(self, dom_y: Domain, trial: FemSpace, singular: str, n_test: int):
        mesh = dom_y.mesh
        if mesh.dim != 2:
            raise ValueError("regularization needs a triangle mesh on the y side")
        self.mesh = mesh
        self.trial = trial
        self.singular = singular
        self.grad = singular == "grady[1/r]"
        n_trial = trial.n_components
        self.terms = contraction_terms(n_test, 3 if self.grad else 1, n_trial)
        self.n_out = n_test
        fam, op = trial.family, trial.op
        if self.grad:
            ok = {("P0", "id"), ("RWG", "id"), ("RWG", "div")}
        else:
            ok = {("P0", "id"), ("P1", "id"), ("RWG", "id"), ("RWG", "div"),
                  ("P0", "ntimes"), ("P1", "ntimes"), ("RWG", "nx")}
        if mesh is not trial.mesh:
            raise UnsupportedOperationError("regularization needs the y domain on the trial space mesh")
        if (fam, op) not in ok:
            raise UnsupportedOperationError(f"regularization of {singular} is not available for {fam} with {op!r}")
        qs = dom_y.quadrature()
        self.qy = dom_y.gauss_count
        self.Y = qs.points
        self.wy = qs.weights
        self.dofs_q, self.vals_q = local_basis(trial, mesh, qs.element_of, qs.points)
        self.tri = np.ascontiguousarray(mesh.vertices[mesh.elements])
        # element-level trial data
        ne = mesh.n_elements
        self.dofs_e = local_basis(trial, mesh, np.arange(ne), mesh.centroids)[0]
        self.normals = mesh.normals
        if fam == "P1":
            self.grad_lam = mesh.bary_gradients
        if fam == "RWG":
            verts = self.tri
            ledge = np.linalg.norm(verts[:, [2, 0, 1]] - verts[:, [1, 2, 0]], axis=2)
            self.coef = trial._layout.signs * ledge / (2.0 * mesh.measures[:, None])

    def gauss(self, X, ey, eps):
        """Gauss sum over the points of element ey; coincident pairs give 0."""
        q = self.qy
        idx = ey[:, None] * q + np.arange(q)[None, :]  # (R, q)
        D = X[:, None, :] - self.Y[idx]  # x - y
        r = np.linalg.norm(D, axis=2)
        mask = r < eps
        rs = np.where(mask, 1.0, r)
        w = np.where(mask, 0.0, self.wy[idx])
        vals = self.vals_q[idx]  # (R, q, nloc, ncy)
        R, nloc = len(X), vals.shape[2]
        out = np.zeros((R, nloc, self.n_out))
        if not self.grad:
            s = w / rs
            for coef, a, _, c in self.terms:
                out[:, :, a] += coef * np.einsum("rq,rqj->rj", s, vals[..., c])
        else:
            K = D * (w / rs**3)[..., None]  # (R, q, 3): w (x-y)/r^3
            for coef, a, b, c in self.terms:
                out[:, :, a] += coef * np.einsum("rq,rqj->rj", K[..., b], vals[..., c])
        return out

    def exact(self, X, ey):
        """Closed-form y-integral over element ey."""
        res = triangle_integrals(self.tri, X, ey)
        I0, I1, G, rho0 = res[:, 0], res[:, 1:4], res[:, 4:7], res[:, 7:10]
        fam, op = self.trial.family, self.trial.op
        R = len(X)
        if fam == "P0":
            base = I0[:, None, None] if not self.grad else G[:, None, :]  # (R, 1, 1|3)
            if op == "ntimes":
                base = I0[:, None, None] * self.normals[ey][:, None, :]
        elif fam == "P1":
            lam = self.mesh.barycentric(ey, rho0)  # (R, 3)
            gl = self.grad_lam[ey]  # (R, 3, 3)
            base = (lam * I0[:, None] + np.einsum("rjk,rk->rj", gl, I1))[..., None]
            if op == "ntimes":
                base = base * self.normals[ey][:, None, :]
        else:
            coef = self.coef[ey]  # (R, 3)
            verts = self.tri[ey]  # (R, 3, 3), vertex a opposite local edge a
            if op == "div":
                base = (2 * coef)[..., None] * (I0[:, None, None] if not self.grad else G[:, None, :])
            elif not self.grad:
                v = (rho0[:, None, :] - verts) * I0[:, None, None] + I1[:, None, :]
                base = coef[..., None] * v
                if op == "nx":
                    base = np.cross(self.normals[ey][:, None, :], base)
            else:
                xp = X[:, None, :] - verts  # x - p
                if self.n_out == 3:
                    return coef[..., None] * np.cross(G[:, None, :], xp)  # int K x psi
                # scalar test: int K . psi
                dot = np.einsum("rk,rjk->rj", G, xp) - I0[:, None]
                return (coef * dot)[..., None]
        # contract kernel/trial components into the test-side vector
        out = np.zeros((R, base.shape[1], self.n_out))
        if not self.grad:
            for coef, a, _, c in self.terms:
                out[:, :, a] += coef * base[:, :, c]
        else:
            # base holds int K_b psi for scalar trial functions (P0, div)
            for coef, a, b, c in self.terms:
                out[:, :, a] += coef * base[:, :, b]
        return out


def _scatter(rows, cols, vals, shape):
    keep = (rows >= 0) & (cols >= 0)
    m = coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=shape).tocsr()
    m.sum_duplicates()
    return m


def regularize(dom_x: Domain, dom_y: Domain, test: FemSpace, singular_name: str, trial: FemSpace,
               self_rule: tuple[int, int, int] = SELF_RULE, chunk: int = 20000) -> csr_matrix:
    """Sparse correction (semi-analytic minus Gauss-Gauss) of the singular part.

    For element pairs closer than 3 times the larger circumradius, the y
    integral of ``1/r`` (or ``grad_y 1/r``) against the trial functions is
    computed in closed form and the x integral with the Gauss rule of
    ``dom_x``; coincident element pairs use a graded x rule instead.  The
    Gauss-Gauss value of the same pairs (with coincident points dropped, as
    in the BEM assembly) is subtracted.
    """
    if singular_name not in ("[1/r]", "grady[1/r]"):
        raise ValueError(f"unsupported singular part {singular_name!r}; expected '[1/r]' or 'grady[1/r]'")
    _check_space(test, dom_x, "test")
    _check_space(trial, dom_y, "trial")
    ty = _TrialIntegrals(dom_y, trial, singular_name, test.n_components)
    mx, my = dom_x.mesh, dom_y.mesh
    qx = dom_x.quadrature()
    eps = _guard(dom_x, dom_y, qx.points, dom_y.quadrature().points)
    ex, ey = _near_pairs(mx.centroids, mx.circumradii, my.centroids, my.circumradii)
    same_mesh = mx is my
    is_self = (ex == ey) if same_mesh else np.zeros(len(ex), bool)
    q = dom_x.gauss_count
    shape = (test.n_dofs, trial.n_dofs)
    total = csr_matrix(shape)
    lam_s, w_s = graded_self_rule(*self_rule)

    def contribution(exr, eyr, X, W, method):
        # records grouped by pair: X (P, n, 3), W (P, n)
        P, n = W.shape
        Xf = X.reshape(-1, 3)
        ey_f = np.repeat(eyr, n)
        Y = ty.exact(Xf, ey_f) if method == "exact" else ty.gauss(Xf, ey_f, eps)
        dx, vx = local_basis(test, mx, np.repeat(exr, n), Xf)  # (R, nlx), (R, nlx, ncx)
        loc = np.einsum("rix,rjx->rij", vx * W.reshape(-1)[:, None, None], Y)
        loc = loc.reshape(P, n, *loc.shape[1:]).sum(axis=1)  # (P, nlx, nly)
        dx = dx.reshape(P, n, -1)[:, 0]
        dy = ty.dofs_e[eyr]
        rows = np.repeat(dx[:, :, None], dy.shape[1], axis=2).ravel()
        cols = np.repeat(dy[:, None, :], dx.shape[1], axis=1).ravel()
        return rows, cols, loc.ravel()

    for lo in range(0, len(ex), chunk):
        sl = slice(lo, lo + chunk)
        cex, cey, cself = ex[sl], ey[sl], is_self[sl]
        parts = []
        # non-coincident pairs: domain rule for x, both methods
        o = ~cself
        if np.any(o):
            idx = cex[o][:, None] * q + np.arange(q)[None, :]
            X, W = qx.points[idx], qx.weights[idx]
            r1, c1, v1 = contribution(cex[o], cey[o], X, W, "exact")
            r2, c2, v2 = contribution(cex[o], cey[o], X, W, "gauss")
            parts.append((r1, c1, v1 - v2))
        if np.any(cself):
            e = cex[cself]
            verts = mx.vertices[mx.elements[e]]  # (P, 3, 3)
            X = np.einsum("ni,pik->pnk", lam_s, verts)
            W = mx.measures[e][:, None] * w_s[None, :]
            parts.append(contribution(e, e, X, W, "exact"))
            idx = e[:, None] * q + np.arange(q)[None, :]
            r2, c2, v2 = contribution(e, e, qx.points[idx], qx.weights[idx], "gauss")
            parts.append((r2, c2, -v2))
        for r, c, v in parts:
            total = total + _scatter(r, c, v, shape)
    total = csr_matrix(total)
    total.sum_duplicates()
    total.sort_indices()
    return total


def regularize_radiation(points: np.ndarray, dom_y: Domain, singular_name: str, trial: FemSpace,
                         chunk: int = 200000) -> csr_matrix:
    """Collocation analog of ``regularize``: corrections at observation points.

    Points within 3 circumradii of an element centroid get the closed-form
    value of the singular part minus its Gauss sum.
    """
    if singular_name not in ("[1/r]", "grady[1/r]"):
        raise ValueError(f"unsupported singular part {singular_name!r}; expected '[1/r]' or 'grady[1/r]'")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    _check_space(trial, dom_y, "trial")
    n_out = 3 if singular_name == "grady[1/r]" and trial.n_components == 1 else 1
    ty = _TrialIntegrals(dom_y, trial, singular_name, n_out)
    if n_out != 1:
        raise UnsupportedOperationError("regularize_radiation returns scalar values only")
    my = dom_y.mesh
    shape = (len(points), trial.n_dofs)
    if len(points) == 0:
        return csr_matrix(shape)
    eps = scene_epsilon(points, dom_y.quadrature().points)
    radius = NEAR_FACTOR * my.circumradii.max()
    S = cKDTree(points).sparse_distance_matrix(cKDTree(my.centroids), radius, output_type="coo_matrix")
    p, ey = S.row.astype(np.int64), S.col.astype(np.int64)
    zp, zy = _coincident_centroids(points, my.centroids)
    p, ey = np.concatenate([p, zp]), np.concatenate([ey, zy])
    keep = np.linalg.norm(points[p] - my.centroids[ey], axis=1) <= NEAR_FACTOR * my.circumradii[ey]
    p, ey = p[keep], ey[keep]
    total = csr_matrix(shape)
    for lo in range(0, len(p), chunk):
        cp, cey = p[lo:lo + chunk], ey[lo:lo + chunk]
        X = points[cp]
        val = ty.exact(X, cey)[..., 0] - ty.gauss(X, cey, eps)[..., 0]  # (R, nly)
        dy = ty.dofs_e[cey]
        rows = np.repeat(cp, dy.shape[1])
        total = total + _scatter(rows, dy.ravel(), val.ravel(), shape)
    total = csr_matrix(total)
    total.sum_duplicates()
    total.sort_indices()
    return total
