"""Hierarchical matrices: cluster trees, ACA compression and H-arithmetic.

Indices inside an ``HMatrix`` follow the permuted order of its cluster
trees, so every tree node is a contiguous range.  The public matvec, solve
and dense conversions accept and return vectors in the original order.

Low-rank leaves store ``U @ V.T`` (plain transpose, no conjugation).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csc_matrix, csr_matrix, identity, issparse

logger = logging.getLogger(__name__)

LEAF_SIZE = 64
ETA = 1.0


class FactorizationError(ArithmeticError):
    """Zero (or numerically zero) pivot during H-LU."""


class StructureError(ValueError):
    """Operands of an H-matrix operation do not share a block structure."""


# cluster trees --------------------------------------------------------------


@dataclass(eq=False)
class ClusterNode:
    lo: int
    hi: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    children: tuple = ()
    level: int = 0

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_hi - self.box_lo))


@dataclass(eq=False)
class ClusterTree:
    """Binary tree of index ranges over a permutation of the points.

    Attributes
    ----------
    points : (N, 3) ndarray
    perm : (N,) ndarray
        ``perm[k]`` is the original index at tree position k.
    root : ClusterNode
    leaf_size : int
    """

    points: np.ndarray
    perm: np.ndarray
    root: ClusterNode
    leaf_size: int

    @property
    def n(self) -> int:
        return len(self.perm)

    def nodes(self):
        stack = [self.root]
        while stack:
            nd = stack.pop()
            yield nd
            stack.extend(reversed(nd.children))

    def leaves(self):
        return [nd for nd in self.nodes() if nd.is_leaf]


def build_cluster_tree(points: np.ndarray, leaf_size: int = LEAF_SIZE, extents=None) -> ClusterTree:
    """Median bisection along the longest box axis until ranges fit ``leaf_size``.

    Parameters
    ----------
    points : (N, 3) array_like
        Splitting coordinates, one per index.
    extents : tuple of (N, 3) arrays, optional
        Per-index boxes (lo, hi) used for node boxes instead of the points,
        e.g. the supports of basis functions.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 1:
        raise ValueError("a cluster tree needs at least one point")
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    elo, ehi = (pts, pts) if extents is None else (np.asarray(extents[0], float), np.asarray(extents[1], float))
    perm = np.arange(len(pts))

    def make(lo, hi, level):
        idx = perm[lo:hi]
        node = ClusterNode(lo, hi, elo[idx].min(axis=0), ehi[idx].max(axis=0), level=level)
        if hi - lo <= leaf_size:
            return node
        p = pts[idx]
        axis = int(np.argmax(p.max(axis=0) - p.min(axis=0)))
        # stable sort keeps the build deterministic for repeated coordinates
        order = np.argsort(p[:, axis], kind="stable")
        perm[lo:hi] = idx[order]
        mid = lo + (hi - lo) // 2
        node.children = (make(lo, mid, level + 1), make(mid, hi, level + 1))
        return node

    root = make(0, len(pts), 0)
    return ClusterTree(pts, perm, root, leaf_size)


def box_distance(a: ClusterNode, b: ClusterNode) -> float:
    gap = np.maximum(0.0, np.maximum(a.box_lo - b.box_hi, b.box_lo - a.box_hi))
    return float(np.linalg.norm(gap))


def admissible(a: ClusterNode, b: ClusterNode, eta: float) -> bool:
    d = box_distance(a, b)
    return d > 0 and min(a.diameter, b.diameter) <= eta * d


# low-rank helpers -------------------------------------------------------------


def truncate(U: np.ndarray, V: np.ndarray, tol: float):
    """Recompress U V^T, dropping singular values below tol * sigma_1."""
    if U.shape[1] == 0:
        return U, V
    Qu, Ru = np.linalg.qr(U)
    Qv, Rv = np.linalg.qr(V)
    W, s, Zh = np.linalg.svd(Ru @ Rv.T)
    if s[0] == 0:
        return U[:, :0], V[:, :0]
    r = int(np.count_nonzero(s > tol * s[0]))
    return Qu @ (W[:, :r] * s[:r]), Qv @ Zh[:r].T


def _dense_to_rk(D: np.ndarray, tol: float):
    W, s, Zh = np.linalg.svd(D, full_matrices=False)
    if len(s) == 0 or s[0] == 0:
        return np.zeros((D.shape[0], 0), D.dtype), np.zeros((D.shape[1], 0), D.dtype)
    r = int(np.count_nonzero(s > tol * s[0]))
    return W[:, :r] * s[:r], Zh[:r].T


def aca(block_evaluator, m: int, n: int, tol: float, max_rank: int | None = None):
    """Partial-pivot adaptive cross approximation.

    Parameters
    ----------
    block_evaluator : callable
        ``f(rows, cols)`` returning the sub-block for index arrays.  Only
        single rows and columns are requested.
    m, n : int
        Block shape.
    tol : float
        Relative accuracy in (0, 1).

    Returns
    -------
    U : (m, r) ndarray
    V : (n, r) ndarray
        With block ~= U @ V.T.  ``r == min(m, n)`` signals that no
        compression was achieved.
    """
    if not 0 < tol < 1:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    kmax = min(m, n) if max_rank is None else min(m, n, max_rank)
    all_c = np.arange(n)
    all_r = np.arange(m)
    us, vs = [], []
    norm2 = 0.0
    used = np.zeros(m, dtype=bool)
    i = 0
    zero_rows = 0
    while len(us) < kmax:
        used[i] = True
        row = np.asarray(block_evaluator(np.array([i]), all_c), dtype=complex).ravel()
        for u, v in zip(us, vs):
            row -= u[i] * v
        j = int(np.argmax(np.abs(row)))
        if abs(row[j]) == 0.0:
            # exhausted row: try another one, and call the block zero after
            # a few empty rows in a row
            zero_rows += 1
            free = np.flatnonzero(~used)
            if len(free) == 0 or zero_rows > min(m, 8) and not us or zero_rows > 3 and us:
                break
            i = int(free[0])
            continue
        zero_rows = 0
        v = row / row[j]
        u = np.asarray(block_evaluator(all_r, np.array([j])), dtype=complex).ravel()
        for uu, vv in zip(us, vs):
            u -= vv[j] * uu
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        cross = sum((np.vdot(uu, u) * np.vdot(vv, v)).real for uu, vv in zip(us, vs))
        norm2 += 2 * cross + (nu * nv) ** 2
        if us and nu * nv <= tol * np.sqrt(max(norm2, 0.0)):
            # the new cross is below tolerance: the current factors suffice
            break
        us.append(u)
        vs.append(v)
        cand = np.abs(u)
        cand[used] = -1
        if cand.max() < 0:
            break
        i = int(np.argmax(cand))
    if not us:
        return np.zeros((m, 0), complex), np.zeros((n, 0), complex)
    return np.stack(us, axis=1), np.stack(vs, axis=1)


# blocks -----------------------------------------------------------------------


class Block:
    """Node of the block tree: 'dense', 'rk' (U V^T) or 'h' (grid of children)."""

    __slots__ = ("rows", "cols", "kind", "D", "U", "V", "children")

    def __init__(self, rows: ClusterNode, cols: ClusterNode, kind: str):
        self.rows, self.cols, self.kind = rows, cols, kind
        self.D = self.U = self.V = None
        self.children = None

    @property
    def shape(self):
        return (self.rows.size, self.cols.size)

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "Block":
        b = Block(self.rows, self.cols, self.kind)
        if self.kind == "dense":
            b.D = self.D.copy()
        elif self.kind == "rk":
            b.U, b.V = self.U.copy(), self.V.copy()
        else:
            b.children = [[c.copy() for c in row] for row in self.children]
        return b

    def leaves(self):
        if self.kind != "h":
            yield self
            return
        for row in self.children:
            for c in row:
                yield from c.leaves()

    def matmat(self, X: np.ndarray) -> np.ndarray:
        """self @ X for X with self.cols.size rows (local indexing)."""
        if self.kind == "dense":
            return self.D @ X
        if self.kind == "rk":
            return self.U @ (self.V.T @ X)
        out = np.zeros((self.rows.size, X.shape[1]), dtype=np.result_type(X, complex))
        for row in self.children:
            for c in row:
                r0, c0 = c.rows.lo - self.rows.lo, c.cols.lo - self.cols.lo
                out[r0:r0 + c.rows.size] += c.matmat(X[c0:c0 + c.cols.size])
        return out

    def tmatmat(self, X: np.ndarray) -> np.ndarray:
        """self.T @ X."""
        if self.kind == "dense":
            return self.D.T @ X
        if self.kind == "rk":
            return self.V @ (self.U.T @ X)
        out = np.zeros((self.cols.size, X.shape[1]), dtype=np.result_type(X, complex))
        for row in self.children:
            for c in row:
                r0, c0 = c.rows.lo - self.rows.lo, c.cols.lo - self.cols.lo
                out[c0:c0 + c.cols.size] += c.tmatmat(X[r0:r0 + c.rows.size])
        return out

    def to_dense(self) -> np.ndarray:
        if self.kind == "dense":
            return self.D.copy()
        if self.kind == "rk":
            return self.U @ self.V.T
        out = np.zeros(self.shape, dtype=complex)
        for row in self.children:
            for c in row:
                r0, c0 = c.rows.lo - self.rows.lo, c.cols.lo - self.cols.lo
                out[r0:r0 + c.rows.size, c0:c0 + c.cols.size] = c.to_dense()
        return out

    def transpose(self) -> "Block":
        b = Block(self.cols, self.rows, self.kind)
        if self.kind == "dense":
            b.D = self.D.T.copy()
        elif self.kind == "rk":
            b.U, b.V = self.V.copy(), self.U.copy()
        else:
            b.children = [[self.children[i][j].transpose() for i in range(len(self.children))]
                          for j in range(len(self.children[0]))]
        return b

    def scale(self, alpha):
        if self.kind == "dense":
            self.D = self.D * alpha
        elif self.kind == "rk":
            self.U = self.U * alpha
        else:
            for row in self.children:
                for c in row:
                    c.scale(alpha)


def _split(node: ClusterNode):
    return node.children if node.children else (node,)


def _zero_rk(rows, cols):
    b = Block(rows, cols, "rk")
    b.U = np.zeros((rows.size, 0), complex)
    b.V = np.zeros((cols.size, 0), complex)
    return b


def build_partition(row_tree: ClusterTree, col_tree: ClusterTree, eta: float = ETA) -> Block:
    """Empty block tree: admissible pairs become 'rk', leaf pairs 'dense'."""

    def make(r, c):
        if admissible(r, c, eta):
            return _zero_rk(r, c)
        if r.is_leaf and c.is_leaf:
            b = Block(r, c, "dense")
            b.D = np.zeros((r.size, c.size), complex)
            return b
        b = Block(r, c, "h")
        b.children = [[make(rr, cc) for cc in _split(c)] for rr in _split(r)]
        return b

    return make(row_tree.root, col_tree.root)


# H-arithmetic on blocks ------------------------------------------------------------


def _add_rk(C: Block, U, V, tol):
    if U.shape[1] == 0:
        return
    if C.kind == "rk":
        C.U, C.V = truncate(np.hstack([C.U, U]), np.hstack([C.V, V]), tol)
    elif C.kind == "dense":
        C.D += U @ V.T
    else:
        for row in C.children:
            for c in row:
                r0, c0 = c.rows.lo - C.rows.lo, c.cols.lo - C.cols.lo
                _add_rk(c, U[r0:r0 + c.rows.size], V[c0:c0 + c.cols.size], tol)


def _add_dense(C: Block, D, tol):
    if C.kind == "dense":
        C.D += D
    elif C.kind == "rk":
        U, V = _dense_to_rk(D, tol)
        _add_rk(C, U, V, tol)
    else:
        for row in C.children:
            for c in row:
                r0, c0 = c.rows.lo - C.rows.lo, c.cols.lo - C.cols.lo
                _add_dense(c, D[r0:r0 + c.rows.size, c0:c0 + c.cols.size], tol)


def _add_block(C: Block, A: Block, alpha, tol):
    """C += alpha * A for blocks over the same index ranges."""
    if A.kind == "rk":
        _add_rk(C, alpha * A.U, A.V, tol)
    elif A.kind == "dense":
        _add_dense(C, alpha * A.D, tol)
    elif C.kind == "h":
        if len(C.children) != len(A.children) or len(C.children[0]) != len(A.children[0]):
            raise StructureError("block trees do not conform")
        for crow, arow in zip(C.children, A.children):
            for c, a in zip(crow, arow):
                _add_block(c, a, alpha, tol)
    elif C.kind == "dense":
        C.D += alpha * A.to_dense()
    else:
        U, V = _product_rk_of(A, tol)
        _add_rk(C, alpha * U, V, tol)


def _product_rk_of(A: Block, tol):
    """Low-rank form of an h block (agglomeration of its leaves)."""
    if A.kind == "rk":
        return A.U, A.V
    if A.kind == "dense":
        return _dense_to_rk(A.D, tol)
    m, n = A.shape
    Us, Vs = [], []
    for row in A.children:
        for c in row:
            u, v = _product_rk_of(c, tol)
            U = np.zeros((m, u.shape[1]), complex)
            V = np.zeros((n, v.shape[1]), complex)
            r0, c0 = c.rows.lo - A.rows.lo, c.cols.lo - A.cols.lo
            U[r0:r0 + c.rows.size] = u
            V[c0:c0 + c.cols.size] = v
            Us.append(U)
            Vs.append(V)
    return truncate(np.hstack(Us), np.hstack(Vs), tol)


def _product_rk(A: Block, B: Block, tol):
    """A @ B in low-rank form."""
    if A.kind == "rk":
        return A.U, B.tmatmat(A.V)
    if B.kind == "rk":
        return A.matmat(B.U), B.V
    if A.kind == "dense":
        return _dense_to_rk(A.D @ B.to_dense(), tol)
    if B.kind == "dense":
        return _dense_to_rk(A.matmat(B.D), tol)
    m, n = A.rows.size, B.cols.size
    Us, Vs = [], []
    for i, arow in enumerate(A.children):
        for j in range(len(B.children[0])):
            for k, a in enumerate(arow):
                b = B.children[k][j]
                u, v = _product_rk(a, b, tol)
                if u.shape[1] == 0:
                    continue
                U = np.zeros((m, u.shape[1]), complex)
                V = np.zeros((n, v.shape[1]), complex)
                r0, c0 = a.rows.lo - A.rows.lo, b.cols.lo - B.cols.lo
                U[r0:r0 + a.rows.size] = u
                V[c0:c0 + b.cols.size] = v
                Us.append(U)
                Vs.append(V)
    if not Us:
        return np.zeros((m, 0), complex), np.zeros((n, 0), complex)
    return truncate(np.hstack(Us), np.hstack(Vs), tol)


def _mul_add(C: Block, A: Block, B: Block, alpha, tol):
    """C += alpha * A @ B, keeping the structure of C."""
    if A.kind == "rk":
        if A.rank:
            _add_rk(C, alpha * A.U, B.tmatmat(A.V), tol)
        return
    if B.kind == "rk":
        if B.rank:
            _add_rk(C, alpha * A.matmat(B.U), B.V, tol)
        return
    if C.kind == "h" and A.kind == "h" and B.kind == "h":
        for i, crow in enumerate(C.children):
            for j, c in enumerate(crow):
                for k in range(len(A.children[0])):
                    _mul_add(c, A.children[i][k], B.children[k][j], alpha, tol)
        return
    if C.kind == "rk" and A.kind == "h" and B.kind == "h":
        U, V = _product_rk(A, B, tol)
        _add_rk(C, alpha * U, V, tol)
        return
    if A.kind == "dense":
        P = A.D @ B.to_dense()
    elif B.kind == "dense":
        P = A.matmat(B.D)
    else:
        P = A.matmat(B.to_dense())
    _add_dense(C, alpha * P, tol)


def _dense_lu(D: np.ndarray):
    """LU without pivoting; returns unit-lower L and upper U."""
    A = np.array(D, dtype=complex)
    n = A.shape[0]
    scale = np.abs(A).max() if A.size else 0.0
    for k in range(n):
        p = A[k, k]
        if not abs(p) > 1e-14 * scale:
            raise FactorizationError(f"zero pivot at local index {k} (|pivot| = {abs(p):.3g})")
        A[k + 1:, k] /= p
        A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k, k + 1:])
    L = np.tril(A, -1) + np.eye(n)
    return L, np.triu(A)


def _lower_solve(L: Block, M: np.ndarray) -> np.ndarray:
    """Solve L X = M with unit-lower L."""
    if L.kind == "dense":
        return sla.solve_triangular(L.D, M, lower=True, unit_diagonal=True)
    X = np.array(M, dtype=complex)
    ch = L.children
    for i in range(len(ch)):
        ri = slice(ch[i][i].rows.lo - L.rows.lo, ch[i][i].rows.hi - L.rows.lo)
        for k in range(i):
            rk = slice(ch[k][k].rows.lo - L.rows.lo, ch[k][k].rows.hi - L.rows.lo)
            X[ri] -= ch[i][k].matmat(X[rk])
        X[ri] = _lower_solve(ch[i][i], X[ri])
    return X


def _upper_solve(U: Block, M: np.ndarray) -> np.ndarray:
    """Solve U X = M with upper U."""
    if U.kind == "dense":
        return sla.solve_triangular(U.D, M, lower=False)
    X = np.array(M, dtype=complex)
    ch = U.children
    n = len(ch)
    for i in reversed(range(n)):
        ri = slice(ch[i][i].rows.lo - U.rows.lo, ch[i][i].rows.hi - U.rows.lo)
        for k in range(i + 1, n):
            rk = slice(ch[k][k].rows.lo - U.rows.lo, ch[k][k].rows.hi - U.rows.lo)
            X[ri] -= ch[i][k].matmat(X[rk])
        X[ri] = _upper_solve(ch[i][i], X[ri])
    return X


def _upper_t_solve(U: Block, M: np.ndarray) -> np.ndarray:
    """Solve U^T Y = M."""
    if U.kind == "dense":
        return sla.solve_triangular(U.D, M, lower=False, trans="T")
    Y = np.array(M, dtype=complex)
    ch = U.children
    for i in range(len(ch)):
        ri = slice(ch[i][i].rows.lo - U.rows.lo, ch[i][i].rows.hi - U.rows.lo)
        for k in range(i):
            rk = slice(ch[k][k].rows.lo - U.rows.lo, ch[k][k].rows.hi - U.rows.lo)
            Y[ri] -= ch[k][i].tmatmat(Y[rk])
        Y[ri] = _upper_t_solve(ch[i][i], Y[ri])
    return Y


def _solve_lower_block(L: Block, B: Block, tol) -> Block:
    """X with L X = B, in the structure of B (B is consumed)."""
    if B.kind == "rk":
        B.U = _lower_solve(L, B.U)
        return B
    if B.kind == "dense":
        B.D = _lower_solve(L, B.D)
        return B
    if L.kind != "h":
        B.children = [[_solve_lower_block(L, b, tol) for b in row] for row in B.children]
        return B
    ch = L.children
    for j in range(len(B.children[0])):
        for i in range(len(ch)):
            for k in range(i):
                _mul_add(B.children[i][j], ch[i][k], B.children[k][j], -1.0, tol)
            B.children[i][j] = _solve_lower_block(ch[i][i], B.children[i][j], tol)
    return B


def _solve_upper_right_block(U: Block, B: Block, tol) -> Block:
    """X with X U = B, in the structure of B (B is consumed)."""
    if B.kind == "rk":
        B.V = _upper_t_solve(U, B.V)
        return B
    if B.kind == "dense":
        B.D = _upper_t_solve(U, B.D.T).T
        return B
    if U.kind != "h":
        B.children = [[_solve_upper_right_block(U, b, tol) for b in row] for row in B.children]
        return B
    ch = U.children
    for i in range(len(B.children)):
        for j in range(len(ch)):
            for k in range(j):
                _mul_add(B.children[i][j], B.children[i][k], ch[k][j], -1.0, tol)
            B.children[i][j] = _solve_upper_right_block(ch[j][j], B.children[i][j], tol)
    return B


def _lu_block(A: Block, tol):
    """In-place H-LU of a diagonal block; returns (L, U) block trees."""
    if A.kind == "dense":
        Ld, Ud = _dense_lu(A.D)
        L, U = Block(A.rows, A.cols, "dense"), Block(A.rows, A.cols, "dense")
        L.D, U.D = Ld, Ud
        return L, U
    if A.kind != "h":
        raise StructureError("diagonal block must be dense or hierarchical")
    ch = A.children
    n = len(ch)
    L = Block(A.rows, A.cols, "h")
    U = Block(A.rows, A.cols, "h")
    L.children = [[None] * n for _ in range(n)]
    U.children = [[None] * n for _ in range(n)]
    for i in range(n):
        L.children[i][i], U.children[i][i] = _lu_block(ch[i][i], tol)
        for j in range(i + 1, n):
            U.children[i][j] = _solve_lower_block(L.children[i][i], ch[i][j], tol)
            L.children[j][i] = _solve_upper_right_block(U.children[i][i], ch[j][i], tol)
            L.children[i][j] = _zero_rk(ch[i][j].rows, ch[i][j].cols)
            U.children[j][i] = _zero_rk(ch[j][i].rows, ch[j][i].cols)
        for j in range(i + 1, n):
            for k in range(i + 1, n):
                _mul_add(ch[j][k], L.children[j][i], U.children[i][k], -1.0, tol)
    return L, U


# the matrix -----------------------------------------------------------------------


@dataclass(eq=False)
class HMatrix:
    """Hierarchical matrix over (row tree x column tree).

    Attributes
    ----------
    root : Block
    row_tree, col_tree : ClusterTree
    tol : float
        Accuracy used for the build and for recompression.
    """

    root: Block
    row_tree: ClusterTree
    col_tree: ClusterTree
    tol: float
    eta: float = ETA
    _leaves: list = field(default=None, repr=False)

    @property
    def shape(self):
        return (self.row_tree.n, self.col_tree.n)

    @property
    def dtype(self):
        return np.dtype(complex)

    def leaves(self) -> list:
        if self._leaves is None:
            self._leaves = list(self.root.leaves())
        return self._leaves

    def _changed(self):
        self._leaves = None

    # products
    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"vector of length {x.shape[0]} does not match {self.shape}")
        xp = x[self.col_tree.perm]
        squeeze = xp.ndim == 1
        if squeeze:
            xp = xp[:, None]
        yp = np.zeros((self.shape[0], xp.shape[1]), dtype=np.result_type(xp, complex))
        for b in self.leaves():
            xs = xp[b.cols.lo:b.cols.hi]
            if b.kind == "dense":
                yp[b.rows.lo:b.rows.hi] += b.D @ xs
            elif b.U.shape[1]:
                yp[b.rows.lo:b.rows.hi] += b.U @ (b.V.T @ xs)
        y = np.empty_like(yp)
        y[self.row_tree.perm] = yp
        return y[:, 0] if squeeze else y

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        """Conjugate-transpose product H^H x."""
        return np.conj(self.transpose().matvec(np.conj(x)))

    def __matmul__(self, x):
        if isinstance(x, HMatrix):
            return mul(self, x)
        return self.matvec(x)

    def transpose(self) -> "HMatrix":
        return HMatrix(self.root.transpose(), self.col_tree, self.row_tree, self.tol, self.eta)

    @property
    def T(self):
        return self.transpose()

    def to_dense(self) -> np.ndarray:
        Dp = self.root.to_dense()
        out = np.empty_like(Dp)
        out[np.ix_(self.row_tree.perm, self.col_tree.perm)] = Dp
        return out

    def copy(self) -> "HMatrix":
        return HMatrix(self.root.copy(), self.row_tree, self.col_tree, self.tol, self.eta)

    # arithmetic
    def __mul__(self, alpha):
        return scale(self, alpha)

    __rmul__ = __mul__

    def __truediv__(self, alpha):
        return scale(self, 1.0 / alpha)

    def __neg__(self):
        return scale(self, -1.0)

    def __add__(self, other):
        if isinstance(other, HMatrix):
            return add(self, other)
        if issparse(other):
            return add_sparse(self, other)
        return NotImplemented

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, HMatrix):
            return add(self, other, alpha=-1.0)
        if issparse(other):
            return add_sparse(self, -other)
        return NotImplemented

    # diagnostics
    def rank_map(self) -> list[tuple]:
        """One (row_lo, row_hi, col_lo, col_hi, kind, rank) row per leaf, in tree order."""
        out = []
        for b in self.leaves():
            r = min(b.shape) if b.kind == "dense" else b.rank
            out.append((b.rows.lo, b.rows.hi, b.cols.lo, b.cols.hi, b.kind, r))
        return out

    def write_rank_map(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row_lo", "row_hi", "col_lo", "col_hi", "kind", "rank"])
            w.writerows(self.rank_map())

    def stored_entries(self) -> int:
        """Stored scalars: m n per dense leaf, r (m + n) per low-rank leaf."""
        total = 0
        for b in self.leaves():
            m, n = b.shape
            total += m * n if b.kind == "dense" else b.rank * (m + n)
        return total

    def check_partition(self) -> None:
        """Raise if the leaves do not tile the index rectangle exactly once."""
        m, n = self.shape
        area = 0
        for b in self.leaves():
            if not (0 <= b.rows.lo < b.rows.hi <= m and 0 <= b.cols.lo < b.cols.hi <= n):
                raise StructureError(f"leaf {b.rows.lo}:{b.rows.hi} x {b.cols.lo}:{b.cols.hi} out of range")
            area += b.rows.size * b.cols.size
        if area != m * n:
            raise StructureError(f"leaves cover {area} entries of {m * n}")
        # disjointness: recursive children tile their parent
        stack = [self.root]
        while stack:
            b = stack.pop()
            if b.kind != "h":
                continue
            rs = [row[0].rows for row in b.children]
            cs = [c.cols for c in b.children[0]]
            if rs[0].lo != b.rows.lo or rs[-1].hi != b.rows.hi or any(x.hi != y.lo for x, y in zip(rs, rs[1:])):
                raise StructureError("row children do not tile their parent")
            if cs[0].lo != b.cols.lo or cs[-1].hi != b.cols.hi or any(x.hi != y.lo for x, y in zip(cs, cs[1:])):
                raise StructureError("column children do not tile their parent")
            for row in b.children:
                stack.extend(row)

    def lu(self, tol: float | None = None):
        return lu(self, tol)


def _conform(A: HMatrix, B: HMatrix):
    if A.row_tree is not B.row_tree or A.col_tree is not B.col_tree:
        if A.shape != B.shape or not (np.array_equal(A.row_tree.perm, B.row_tree.perm)
                                      and np.array_equal(A.col_tree.perm, B.col_tree.perm)):
            raise StructureError("H-matrices are built on different cluster trees")


def scale(H: HMatrix, alpha) -> HMatrix:
    out = H.copy()
    out.root.scale(alpha)
    return out


def add(A: HMatrix, B: HMatrix, tol: float | None = None, alpha=1.0) -> HMatrix:
    """A + alpha B, recompressed to ``tol`` (default: the larger build tol)."""
    _conform(A, B)
    tol = max(A.tol, B.tol) if tol is None else tol
    out = A.copy()
    out.tol = tol
    _add_block(out.root, B.root, alpha, tol)
    return out


def add_sparse(H: HMatrix, S, tol: float | None = None) -> HMatrix:
    """H + S for a sparse matrix S in the original index order."""
    tol = H.tol if tol is None else tol
    if S.shape != H.shape:
        raise ValueError(f"sparse shape {S.shape} does not match {H.shape}")
    Sp = csr_matrix(S)[H.row_tree.perm][:, H.col_tree.perm].tocsr()
    out = H.copy()
    for b in out.leaves():
        sub = Sp[b.rows.lo:b.rows.hi, b.cols.lo:b.cols.hi]
        if sub.nnz == 0:
            continue
        if b.kind == "dense":
            b.D += sub.toarray()
        else:
            _add_dense(b, sub.toarray(), tol)
    out._changed()
    return out


def mul(A: HMatrix, B: HMatrix, tol: float | None = None) -> HMatrix:
    """A @ B in the partition of (A rows x B columns)."""
    if A.col_tree is not B.row_tree and not np.array_equal(A.col_tree.perm, B.row_tree.perm):
        raise StructureError("inner cluster trees differ")
    tol = max(A.tol, B.tol) if tol is None else tol
    root = build_partition(A.row_tree, B.col_tree, A.eta)
    _mul_add(root, A.root, B.root, 1.0, tol)
    return HMatrix(root, A.row_tree, B.col_tree, tol, A.eta)


def lu(H: HMatrix, tol: float | None = None):
    """Block LU without global pivoting: H ~= L U, L unit lower, U upper.

    Raises
    ------
    FactorizationError
        On a numerically zero pivot.
    """
    if H.row_tree is not H.col_tree and not np.array_equal(H.row_tree.perm, H.col_tree.perm):
        raise StructureError("lu needs identical row and column trees")
    tol = H.tol if tol is None else tol
    A = H.root.copy()
    L, U = _lu_block(A, tol)
    return (HMatrix(L, H.row_tree, H.col_tree, tol, H.eta),
            HMatrix(U, H.row_tree, H.col_tree, tol, H.eta))


def solve(H, b: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Solve H x = b using an existing (L, U) pair or a fresh factorization."""
    L, U = H if isinstance(H, tuple) else lu(H, tol)
    b = np.asarray(b)
    bp = b[L.row_tree.perm]
    squeeze = bp.ndim == 1
    if squeeze:
        bp = bp[:, None]
    y = _lower_solve(L.root, bp.astype(complex))
    xp = _upper_solve(U.root, y)
    x = np.empty_like(xp)
    x[U.col_tree.perm] = xp
    return x[:, 0] if squeeze else x


def identity_h(tree: ClusterTree, eta: float = ETA) -> HMatrix:
    root = build_partition(tree, tree, eta)
    for b in root.leaves():
        if b.kind == "dense" and b.rows is b.cols:
            b.D = np.eye(b.rows.size, dtype=complex)
    return HMatrix(root, tree, tree, 1e-12, eta)


# building --------------------------------------------------------------------------


class _EntryFiller:
    """Leaf filler for a generic entry evaluator f(rows, cols) in original indexing."""

    def __init__(self, f, row_tree, col_tree):
        self.f, self.rp, self.cp = f, row_tree.perm, col_tree.perm

    def dense(self, r, c):
        return np.asarray(self.f(self.rp[r.lo:r.hi], self.cp[c.lo:c.hi]), dtype=complex)

    def lowrank(self, r, c, tol):
        rp, cp = self.rp[r.lo:r.hi], self.cp[c.lo:c.hi]
        U, V = aca(lambda i, j: self.f(rp[i], cp[j]), r.size, c.size, tol)
        if U.shape[1] >= min(r.size, c.size):
            return None
        return U, V


def _fill(root: Block, filler, tol, symmetric: bool = False):
    """Evaluate every leaf; with ``symmetric`` the lower blocks mirror the upper ones."""
    demoted = 0
    done = {}
    mirrored = []
    stack = [root]
    while stack:
        b = stack.pop()
        if b.kind == "h":
            for row in reversed(b.children):
                stack.extend(reversed(row))
            continue
        if symmetric and b.rows.lo > b.cols.lo:
            mirrored.append(b)
            continue
        if b.kind == "dense":
            b.D = filler.dense(b.rows, b.cols)
        else:
            uv = filler.lowrank(b.rows, b.cols, tol)
            if uv is None:
                b.kind, b.U, b.V = "dense", None, None
                b.D = filler.dense(b.rows, b.cols)
                demoted += 1
            else:
                b.U, b.V = uv
        if symmetric:
            done[(id(b.rows), id(b.cols))] = b
    for b in mirrored:
        src = done[(id(b.cols), id(b.rows))]
        b.kind = src.kind
        if src.kind == "dense":
            b.D = src.D.T.copy()
        else:
            b.U, b.V = src.V.copy(), src.U.copy()
    if demoted:
        logger.info("demoted %d admissible blocks to dense (ACA reached full rank)", demoted)
    return demoted


def assemble_h(entry_evaluator, row_tree: ClusterTree, col_tree: ClusterTree, tol: float,
               eta: float = ETA) -> HMatrix:
    """Compress the matrix with entries ``entry_evaluator(rows, cols)``.

    Admissible blocks are approximated by ACA, the others evaluated densely.
    """
    if not 0 < tol < 1:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    root = build_partition(row_tree, col_tree, eta)
    _fill(root, _EntryFiller(entry_evaluator, row_tree, col_tree), tol)
    H = HMatrix(root, row_tree, col_tree, tol, eta)
    H.check_partition()
    return H


class _QuadSide:
    """One side of a BEM block: quadrature points and weighted basis matrices."""

    def __init__(self, points, mats, tree: ClusterTree):
        self.X = points
        self.mats = [csc_matrix(m)[:, tree.perm] for m in mats]
        pattern = abs(self.mats[0])
        for m in self.mats[1:]:
            pattern = pattern + abs(m)
        self.pattern = csc_matrix(pattern)
        self._cache = {}

    def qpoints(self, node):
        hit = self._cache.get(id(node))
        if hit is None:
            p = self.pattern
            hit = np.unique(p.indices[p.indptr[node.lo]:p.indptr[node.hi]])
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[id(node)] = hit
        return hit

    def local(self, node, q):
        # column slices of CSC are cheap; their rows are exactly q, so the
        # row restriction is a relabelling of indices
        out = []
        for m in self.mats:
            sub = m[:, node.lo:node.hi]
            out.append(csc_matrix((sub.data, np.searchsorted(q, sub.indices), sub.indptr),
                                  shape=(len(q), node.size)))
        return out


def support_extents(mats, points, n):
    """Per-column bounding boxes of the points in each column's support."""
    pattern = abs(csc_matrix(mats[0]))
    for m in mats[1:]:
        pattern = pattern + abs(csc_matrix(m))
    pattern = csc_matrix(pattern)
    pattern.eliminate_zeros()
    lo = np.full((n, 3), np.inf)
    hi = np.full((n, 3), -np.inf)
    cols = np.repeat(np.arange(n), np.diff(pattern.indptr))
    P = points[pattern.indices]
    for k in range(3):
        np.minimum.at(lo[:, k], cols, P[:, k])
        np.maximum.at(hi[:, k], cols, P[:, k])
    empty = ~np.isfinite(lo[:, 0])
    return lo, hi, empty


class _BemFiller:
    """Leaf filler working at quadrature level: G is evaluated or ACA-compressed
    between quadrature points, then projected on the basis functions."""

    def __init__(self, xs: _QuadSide, ys: _QuadSide, kernels, terms, eps):
        self.xs, self.ys, self.k, self.terms, self.eps = xs, ys, kernels, terms, eps

    def dense(self, r, c):
        qr, qc = self.xs.qpoints(r), self.ys.qpoints(c)
        out = np.zeros((r.size, c.size), complex)
        if len(qr) == 0 or len(qc) == 0:
            return out
        Phi, Psi = self.xs.local(r, qr), self.ys.local(c, qc)
        for b in range(self.k.n):
            G = self.k.block(b, self.xs.X[qr], self.ys.X[qc], self.eps)
            for coef, a, kb, cc in self.terms:
                if kb == b:
                    out += coef * (Phi[a].T @ (Psi[cc].T @ G.T).T)
        return out

    def lowrank(self, r, c, tol):
        qr, qc = self.xs.qpoints(r), self.ys.qpoints(c)
        if len(qr) == 0 or len(qc) == 0:
            return np.zeros((r.size, 0), complex), np.zeros((c.size, 0), complex)
        Xr, Yc = self.xs.X[qr], self.ys.X[qc]
        Phi, Psi = self.xs.local(r, qr), self.ys.local(c, qc)
        Us, Vs = [], []
        for b in range(self.k.n):
            f = lambda i, j, b=b: self.k.block(b, Xr[i], Yc[j], self.eps)
            U, V = aca(f, len(qr), len(qc), tol)
            if U.shape[1] >= min(len(qr), len(qc)):
                return None
            for coef, a, kb, cc in self.terms:
                if kb == b and U.shape[1]:
                    Us.append(coef * (Phi[a].T @ U))
                    Vs.append(Psi[cc].T @ V)
        if not Us:
            return np.zeros((r.size, 0), complex), np.zeros((c.size, 0), complex)
        U, V = truncate(np.hstack(Us), np.hstack(Vs), tol)
        if U.shape[1] * (r.size + c.size) >= r.size * c.size:
            return None
        return U, V


def _side_tree(points, mats, n, leaf_size):
    lo, hi, empty = support_extents(mats, points, n)
    centers = np.where(empty[:, None], 0.0, 0.5 * (lo + hi))
    lo = np.where(empty[:, None], centers, lo)
    hi = np.where(empty[:, None], centers, hi)
    return build_cluster_tree(centers, leaf_size, (lo, hi))


def build_bem_h(dom_x, dom_y, test, kernels, trial, tol, eta: float = ETA, leaf_size: int = LEAF_SIZE) -> HMatrix:
    """H-matrix of Phi^T Wx G Wy Psi (see ``assembly.bem_h``)."""
    from .assembly import _guard, _weighted_components, contraction_terms

    Phi = _weighted_components(test, dom_x)
    Psi = _weighted_components(trial, dom_y)
    terms = contraction_terms(len(Phi), kernels.n, len(Psi))
    X, Y = dom_x.quadrature().points, dom_y.quadrature().points
    eps = _guard(dom_x, dom_y, X, Y)
    rt = _side_tree(X, Phi, test.n_dofs, leaf_size)
    if (dom_x is dom_y and test.mesh is trial.mesh and test.family == trial.family
            and np.array_equal(test.constrained, trial.constrained)):
        # same dofs on both sides: share the tree so that lu applies
        ct = rt
    else:
        ct = _side_tree(Y, Psi, trial.n_dofs, leaf_size)
    filler = _BemFiller(_QuadSide(X, Phi, rt), _QuadSide(Y, Psi, ct), kernels, terms, eps)
    root = build_partition(rt, ct, eta)
    # a symmetric kernel between identical test and trial sides gives a
    # (complex) symmetric matrix
    symmetric = (ct is rt and dom_x is dom_y and test.op == trial.op and kernels.is_builtin
                 and all(k.component == 0 for k in kernels.items))
    _fill(root, filler, tol, symmetric)
    H = HMatrix(root, rt, ct, tol, eta)
    H.check_partition()
    return H


def build_radiation_h(points, dom_y, kernels, trial, tol, eps, eta: float = ETA,
                      leaf_size: int = LEAF_SIZE) -> HMatrix:
    """H-matrix of the collocation matrix G Wy Psi at observation points."""
    from .assembly import _weighted_components, contraction_terms

    Psi = _weighted_components(trial, dom_y)
    if kernels.n == 3:
        terms = [(1.0, 0, b, b) for b in range(3)]
    else:
        terms = contraction_terms(1, 1, len(Psi))
    I = identity(len(points), format="csc", dtype=float)
    rt = build_cluster_tree(points, leaf_size)
    Y = dom_y.quadrature().points
    ct = _side_tree(Y, Psi, trial.n_dofs, leaf_size)
    filler = _BemFiller(_QuadSide(points, [I], rt), _QuadSide(Y, Psi, ct), kernels, terms, eps)
    root = build_partition(rt, ct, eta)
    _fill(root, filler, tol)
    H = HMatrix(root, rt, ct, tol, eta)
    H.check_partition()
    return H
