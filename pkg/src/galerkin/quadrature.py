"""Quadrature domains: a mesh paired with a per-element Gauss rule."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .mesh import Mesh

SUPPORTED_COUNTS = {1: (1, 2, 3, 4, 5), 2: (1, 3, 7), 3: (1, 4, 15)}


def _perms(*rows):
    """Distinct permutations of each barycentric tuple, in a fixed order."""
    out = []
    for row in rows:
        seen = []
        for p in itertools.permutations(row):
            if p not in seen:
                seen.append(p)
        out.extend(seen)
    return np.array(out, dtype=float)


@lru_cache(maxsize=None)
def reference_rule(dim: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points (q, dim+1) and weights (q,) summing to 1.

    Parameters
    ----------
    dim : int
        Simplex dimension (1 segment, 2 triangle, 3 tetrahedron).
    count : int
        Number of points.
    """
    if count not in SUPPORTED_COUNTS.get(dim, ()):
        raise ValueError(f"unsupported quadrature count {count} for dimension {dim}; "
                         f"supported counts are {set(SUPPORTED_COUNTS.get(dim, ()))}")
    if dim == 1:
        x, w = np.polynomial.legendre.leggauss(count)
        t = 0.5 * (x + 1.0)
        lam, wts = np.stack([1.0 - t, t], axis=1), 0.5 * w
    elif dim == 2:
        if count == 1:
            lam, wts = np.full((1, 3), 1.0 / 3.0), np.ones(1)
        elif count == 3:
            # interior points; keeps quadrature nodes off shared edges
            lam, wts = _perms((2 / 3, 1 / 6, 1 / 6)), np.full(3, 1.0 / 3.0)
        else:
            s = np.sqrt(15.0)
            a, b = (6.0 - s) / 21.0, (6.0 + s) / 21.0
            lam = np.vstack([np.full((1, 3), 1.0 / 3.0),
                             _perms((1 - 2 * a, a, a)), _perms((1 - 2 * b, b, b))])
            wts = np.concatenate([[9.0 / 40.0], np.full(3, (155.0 - s) / 1200.0),
                                  np.full(3, (155.0 + s) / 1200.0)])
    else:
        if count == 1:
            lam, wts = np.full((1, 4), 0.25), np.ones(1)
        elif count == 4:
            s = np.sqrt(5.0)
            a, b = (5.0 - s) / 20.0, (5.0 + 3.0 * s) / 20.0
            lam, wts = _perms((b, a, a, a)), np.full(4, 0.25)
        else:
            # degree-5 Keast rule, weights given for the unit volume 1/6
            a, b = 0.0665501535736643, 0.4334498464263357
            lam = np.vstack([np.full((1, 4), 0.25), _perms((0.0, 1 / 3, 1 / 3, 1 / 3)),
                             _perms((8 / 11, 1 / 11, 1 / 11, 1 / 11)), _perms((a, a, b, b))])
            wts = 6.0 * np.concatenate([[0.0302836780970892], np.full(4, 0.00602678571428571),
                                        np.full(4, 0.0116452490860290), np.full(6, 0.0109491415613865)])
    lam = np.ascontiguousarray(lam)
    wts = np.ascontiguousarray(wts)
    lam.flags.writeable = False
    wts.flags.writeable = False
    return lam, wts


@dataclass(frozen=True, eq=False)
class Domain:
    """A mesh with a quadrature rule of ``gauss_count`` points per element."""

    mesh: Mesh
    gauss_count: int = 1

    def __post_init__(self):
        if self.mesh.n_elements == 0:
            raise ValueError("cannot build a domain on an empty mesh")
        reference_rule(self.mesh.dim, int(self.gauss_count))
        object.__setattr__(self, "gauss_count", int(self.gauss_count))
        object.__setattr__(self, "_qset", None)

    def quadrature(self) -> "QuadratureSet":
        if self._qset is None:
            object.__setattr__(self, "_qset", _build(self))
        return self._qset


@dataclass(frozen=True, eq=False)
class QuadratureSet:
    """Global quadrature points, stored element by element.

    Attributes
    ----------
    points : (M, 3) ndarray
    weights : (M,) ndarray
        Weights including the element measure.
    element_of : (M,) ndarray
        Element carrying each point.
    bary : (M, d+1) ndarray
        Barycentric coordinates of each point in its element.
    """

    points: np.ndarray
    weights: np.ndarray
    element_of: np.ndarray
    bary: np.ndarray

    def __len__(self):
        return len(self.weights)


def make_domain(mesh: Mesh, gauss_count: int = 1) -> Domain:
    """Pair ``mesh`` with a ``gauss_count``-point rule (1 = centroid)."""
    return Domain(mesh, gauss_count)


def _build(dom: Domain) -> QuadratureSet:
    mesh = dom.mesh
    lam, w = reference_rule(mesh.dim, dom.gauss_count)
    q = len(w)
    verts = mesh.vertices[mesh.elements]  # (Ne, d+1, 3)
    pts = np.einsum("qi,eik->eqk", lam, verts).reshape(-1, 3)
    wts = (mesh.measures[:, None] * w[None, :]).ravel()
    elem = np.repeat(np.arange(mesh.n_elements), q)
    bary = np.tile(lam, (mesh.n_elements, 1))
    for arr in (pts, wts, elem, bary):
        arr.flags.writeable = False
    return QuadratureSet(pts, wts, elem, bary)


def quadrature(dom: Domain) -> QuadratureSet:
    """Quadrature points and weights of ``dom`` (cached on the domain)."""
    return dom.quadrature()


def integrate(dom: Domain, f: Callable[[np.ndarray], np.ndarray]):
    """Integrate ``f`` over the domain.

    ``f`` maps an (M, 3) batch of points to M values (or an (M, ...) array,
    in which case the integral is taken along the first axis).
    """
    qs = dom.quadrature()
    val = np.asarray(f(qs.points))
    if val.ndim == 0 or val.shape[0] != len(qs):
        raise ValueError(f"integrand returned shape {val.shape}, expected first dimension {len(qs)}")
    res = np.tensordot(qs.weights, val, axes=(0, 0))
    return res.item() if np.ndim(res) == 0 else res
