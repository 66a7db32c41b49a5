"""Green kernels and closed-form triangle integrals of 1/r.

Kernel names follow the string convention ``"[exp(ikr)/r]"``, ``"[1/r]"``
and their y-gradients ``"grady[exp(ikr)/r]j"`` / ``"grady[1/r]j"`` (component
j = 1, 2, 3, or all three when the index is omitted).  No 1/(4 pi) factor
is included.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numba as nb
import numpy as np

_NAME = re.compile(r"^(grady)?\[(exp\(ikr\)/r|1/r)\]([123])?$")


class SingularEvaluationError(ValueError):
    """A kernel was evaluated at (nearly) coincident points."""


@nb.njit(parallel=True, cache=True, fastmath=True)
def _green_fill(X, Y, k, comp, eps, out):
    """Fill out[i, j] with the kernel; pairs closer than eps are set to 0.

    comp = 0 is the scalar kernel, comp = 1..3 a component of grad_y.
    Returns the number of masked pairs.
    """
    nx, ny = X.shape[0], Y.shape[0]
    masked = np.zeros(nx, dtype=np.int64)
    for i in nb.prange(nx):
        x0, x1, x2 = X[i, 0], X[i, 1], X[i, 2]
        for j in range(ny):
            d0 = Y[j, 0] - x0
            d1 = Y[j, 1] - x1
            d2 = Y[j, 2] - x2
            r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if r < eps:
                out[i, j] = 0.0
                masked[i] += 1
                continue
            if k == 0.0:
                if comp == 0:
                    out[i, j] = 1.0 / r
                else:
                    dc = d0 if comp == 1 else (d1 if comp == 2 else d2)
                    out[i, j] = -dc / (r * r * r)
            else:
                e = complex(math.cos(k * r), math.sin(k * r))
                if comp == 0:
                    out[i, j] = e / r
                else:
                    dc = d0 if comp == 1 else (d1 if comp == 2 else d2)
                    out[i, j] = e * complex(-1.0, k * r) * (dc / (r * r * r))
    return masked.sum()


@nb.njit(parallel=True, cache=True, fastmath=True)
def _green_rows(X, Y, rows, cols, k, comp, eps, out):
    """Entries G(X[rows[a]], Y[cols[b]]) for a block given by index lists."""
    for a in nb.prange(rows.shape[0]):
        i = rows[a]
        for b in range(cols.shape[0]):
            j = cols[b]
            d0 = Y[j, 0] - X[i, 0]
            d1 = Y[j, 1] - X[i, 1]
            d2 = Y[j, 2] - X[i, 2]
            r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if r < eps:
                out[a, b] = 0.0
                continue
            if k == 0.0:
                if comp == 0:
                    out[a, b] = 1.0 / r
                else:
                    dc = d0 if comp == 1 else (d1 if comp == 2 else d2)
                    out[a, b] = -dc / (r * r * r)
            else:
                e = complex(math.cos(k * r), math.sin(k * r))
                if comp == 0:
                    out[a, b] = e / r
                else:
                    dc = d0 if comp == 1 else (d1 if comp == 2 else d2)
                    out[a, b] = e * complex(-1.0, k * r) * (dc / (r * r * r))


@dataclass(frozen=True)
class Kernel:
    """Helmholtz (or Laplace when k = 0) Green kernel without the 1/(4 pi).

    Attributes
    ----------
    name : str
        Canonical name, e.g. ``"[exp(ikr)/r]"`` or ``"grady[1/r]2"``.
    k : float
        Wavenumber.
    component : int
        0 for the scalar kernel, 1..3 for one gradient component, -1 for the
        full gradient (a 3-component kernel).
    """

    name: str
    k: float = 0.0
    component: int = 0

    @property
    def n_components(self) -> int:
        return 3 if self.component == -1 else 1

    @property
    def is_gradient(self) -> bool:
        return self.component != 0

    @property
    def singular_name(self) -> str:
        """Leading singular part, as accepted by ``regularize``."""
        return "grady[1/r]" if self.is_gradient else "[1/r]"

    def component_kernel(self, c: int) -> "Kernel":
        """Scalar kernel of gradient component c (1..3)."""
        if self.component != -1:
            raise ValueError("component_kernel applies to full-gradient kernels only")
        return Kernel(f"{self.name}{c}", self.k, c)

    def components(self) -> list["Kernel"]:
        return [self.component_kernel(c) for c in (1, 2, 3)] if self.component == -1 else [self]

    def __call__(self, X, Y):
        return evaluate(self, X, Y)


def green_kernel(name: str, k: float = 0.0) -> Kernel:
    """Kernel from its string name.

    Examples
    --------
    >>> green_kernel("[exp(ikr)/r]", 5.0).k
    5.0
    """
    m = _NAME.match(name.replace(" ", ""))
    if m is None:
        raise ValueError(f"unknown kernel name {name!r}")
    grad, base, comp = m.groups()
    if comp and not grad:
        raise ValueError(f"component index only applies to grady kernels: {name!r}")
    if base == "1/r":
        k = 0.0
    if not np.isfinite(k) or k < 0:
        raise ValueError(f"wavenumber must be finite and >= 0, got {k}")
    component = 0 if not grad else (int(comp) if comp else -1)
    return Kernel(name.replace(" ", ""), float(k), component)


def scene_epsilon(X, Y) -> float:
    """Singular guard 1e-12 times the diameter of the scene."""
    pts = [p for p in (X, Y) if len(p)]
    if not pts:
        return 0.0
    lo = np.min([p.min(axis=0) for p in pts], axis=0)
    hi = np.max([p.max(axis=0) for p in pts], axis=0)
    return 1e-12 * float(np.linalg.norm(hi - lo))


def evaluate_masked(kernel: Kernel, X, Y, eps: float, out=None):
    """Kernel matrix with pairs closer than ``eps`` set to 0; returns (G, n_masked)."""
    if kernel.component == -1:
        raise ValueError("evaluate one gradient component at a time")
    X = np.ascontiguousarray(X, dtype=float).reshape(-1, 3)
    Y = np.ascontiguousarray(Y, dtype=float).reshape(-1, 3)
    if out is None:
        out = np.empty((len(X), len(Y)), dtype=complex)
    n = _green_fill(X, Y, kernel.k, kernel.component, eps, out)
    return out, int(n)


def evaluate(kernel: Kernel, X, Y) -> np.ndarray:
    """Nx-by-Ny complex kernel matrix.

    For a full-gradient kernel the result has shape (3, Nx, Ny).

    Raises
    ------
    SingularEvaluationError
        If a pair of points is closer than 1e-12 times the scene diameter.
    """
    X = np.ascontiguousarray(X, dtype=float).reshape(-1, 3)
    Y = np.ascontiguousarray(Y, dtype=float).reshape(-1, 3)
    eps = scene_epsilon(X, Y)
    if kernel.component == -1:
        return np.stack([evaluate(c, X, Y) for c in kernel.components()])
    out, n = evaluate_masked(kernel, X, Y, eps)
    if n:
        from scipy.spatial import cKDTree

        d, j = cKDTree(Y).query(X, k=1)
        i = int(np.argmin(d))
        raise SingularEvaluationError(
            f"kernel {kernel.name} evaluated at coincident points X[{i}] and Y[{int(j[i])}] "
            f"(distance {d[i]:.3g} < {eps:.3g}); use regularization for the near field")
    return out


# closed-form integrals over flat triangles ----------------------------------


@nb.njit(cache=True)
def _tri_integrals_one(A, B, C, x, out):
    """Integrals over triangle ABC of 1/R, (rho - rho0)/R and grad_y(1/R).

    out receives [I0, I1 (3), G (3), rho0 (3)] where R = |x - y|, rho0 the
    projection of x on the triangle plane, I1 = int (y - rho0)/R and
    G = int (x - y)/R^3 (the principal value when x lies in the plane).
    """
    e1 = B - A
    e2 = C - A
    n = np.cross(e1, e2)
    area2 = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
    n = n / area2
    scale = max(math.sqrt(e1 @ e1), math.sqrt(e2 @ e2))
    d = (x - A) @ n
    if abs(d) < 1e-12 * scale:
        d = 0.0
    ad = abs(d)
    rho0 = x - d * n
    I0 = 0.0
    I1 = np.zeros(3)
    Gt = np.zeros(3)
    sbeta = 0.0
    tiny = (1e-14 * scale) ** 2
    for i in range(3):
        if i == 0:
            p, q = B, C
        elif i == 1:
            p, q = C, A
        else:
            p, q = A, B
        le = q - p
        ln = math.sqrt(le @ le)
        lh = le / ln
        mh = np.cross(lh, n)
        t = (p - rho0) @ mh
        lm = (p - rho0) @ lh
        lp = (q - rho0) @ lh
        R02 = t * t + d * d
        Rm = math.sqrt(lm * lm + R02)
        Rp = math.sqrt(lp * lp + R02)
        if R02 <= tiny and lm <= 0.0 <= lp:
            # x on the edge itself: f is log-infinite but every use of it
            # in I0 and I1 is multiplied by t or R0^2 = 0
            f = 0.0
        elif lm >= 0.0:
            f = math.log((Rp + lp) / (Rm + lm))
        elif lp <= 0.0:
            f = math.log((Rm - lm) / (Rp - lp))
        else:
            f = math.log((Rp + lp) * (Rm - lm) / max(R02, tiny))
        if abs(t) > 1e-14 * scale:
            beta = math.atan(t * lp / (R02 + ad * Rp)) - math.atan(t * lm / (R02 + ad * Rm))
        else:
            beta = 0.0
        I0 += t * f
        sbeta += beta
        w = 0.5 * (R02 * f + lp * Rp - lm * Rm)
        I1 += w * mh
        Gt += f * mh
    I0 -= ad * sbeta
    sg = 0.0 if d == 0.0 else (1.0 if d > 0 else -1.0)
    out[0] = I0
    out[1:4] = I1
    out[4:7] = Gt + sg * sbeta * n
    out[7:10] = rho0


@nb.njit(parallel=True, cache=True)
def _tri_integrals(tri, X, which, out):
    """Vectorized ``_tri_integrals_one`` over point/triangle pairs."""
    for p in nb.prange(X.shape[0]):
        t = which[p]
        _tri_integrals_one(tri[t, 0], tri[t, 1], tri[t, 2], X[p], out[p])


def triangle_integrals(tri: np.ndarray, X: np.ndarray, which: np.ndarray) -> np.ndarray:
    """Closed-form integrals for each point X[p] over triangle tri[which[p]].

    Returns an (P, 10) array: I0, I1 (3), G (3), rho0 (3); see
    ``analytic_triangle_integrals``.
    """
    tri = np.ascontiguousarray(tri, dtype=float)
    X = np.ascontiguousarray(X, dtype=float).reshape(-1, 3)
    which = np.ascontiguousarray(which, dtype=np.int64)
    out = np.empty((len(X), 10))
    if len(X):
        _tri_integrals(tri, X, which, out)
    return out


def analytic_triangle_integrals(triangle, x):
    """Integrals of 1/|x-y| and grad_y 1/|x-y| over a flat triangle.

    Parameters
    ----------
    triangle : (3, 3) array_like
        Vertex coordinates.
    x : (3,) array_like
        Evaluation point, anywhere in space.

    Returns
    -------
    value : float
        int_T dy / |x - y|
    gradient : (3,) ndarray
        int_T grad_y (1/|x - y|) dy = int_T (x - y)/|x - y|^3 dy.  For x in
        the plane of T the normal part is taken as the principal value 0.
    """
    tri = np.asarray(triangle, dtype=float).reshape(3, 3)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    scale = np.abs(tri[1:] - tri[0]).max()
    if np.linalg.norm(n) <= 1e-14 * max(scale, 1e-300) ** 2:
        raise ValueError("degenerate triangle")
    res = triangle_integrals(tri[None], np.asarray(x, float)[None], np.zeros(1, np.int64))[0]
    return float(res[0]), res[4:7].copy()
