"""Finite element spaces P0, P1, P2 and RWG with sparse evaluation matrices.

A space is evaluated on a quadrature domain as one sparse matrix per
spatial component, ``B[k, j] = (op phi_j)(x_k)``.  The domain mesh is either
the space mesh itself or a sub-mesh of it (a subset of elements or a set of
facets such as the boundary), in which case traces are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix

from .mesh import LOCAL_EDGES, Mesh, match_vertices, merge_tolerance
from .quadrature import Domain

FAMILIES = ("P0", "P1", "P2", "RWG")
OPERATORS = ("id", "grad", "div", "nx", "ntimes")


class UnsupportedOperationError(ValueError):
    """Operation not defined for this family or operator."""


@dataclass(frozen=True)
class EvalMatrix:
    """Sparse evaluation matrices, one per spatial component.

    Each component is an (M, N) CSR matrix with M quadrature points and N
    free degrees of freedom.
    """

    components: tuple

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def shape(self) -> tuple[int, int]:
        return self.components[0].shape

    def __getitem__(self, i):
        return self.components[i]

    def __iter__(self):
        return iter(self.components)

    def __len__(self):
        return len(self.components)


@dataclass(frozen=True, eq=False)
class FemSpace:
    """Finite element space.

    Parameters
    ----------
    mesh : Mesh
    family : {'P0', 'P1', 'P2', 'RWG'}
    constrained : ndarray of int
        Sorted indices of Dirichlet-constrained dofs.
    op : {'id', 'grad', 'div', 'nx', 'ntimes'}
        Operator applied when the space is evaluated.
    """

    mesh: Mesh
    family: str
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    op: str = "id"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown finite element family {self.family!r}; expected one of {FAMILIES}")
        if self.op not in OPERATORS:
            raise ValueError(f"unknown operator {self.op!r}; expected one of {OPERATORS}")
        if self.family == "RWG" and self.mesh.dim != 2:
            raise ValueError("RWG elements need a dimension-2 (surface) mesh")
        c = np.unique(np.asarray(self.constrained, dtype=np.int64))
        c.flags.writeable = False
        object.__setattr__(self, "constrained", c)

    def __repr__(self):
        return (f"FemSpace({self.family}, op={self.op}, n_dofs={self.n_dofs}, "
                f"constrained={len(self.constrained)})")

    # dof layout is shared by all operator variants of a space, so it lives
    # in a cache keyed on the mesh
    @property
    def _layout(self):
        return _layout(self.mesh, self.family)

    @property
    def n_dofs_full(self) -> int:
        return self._layout.n_dofs

    @property
    def n_dofs(self) -> int:
        """Number of free (unconstrained) dofs."""
        return self.n_dofs_full - len(self.constrained)

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs_full, dtype=bool)
        mask[self.constrained] = False
        return np.flatnonzero(mask)

    @property
    def is_vector(self) -> bool:
        """True when the evaluated field (with ``op`` applied) has 3 components."""
        return _n_components(self.family, self.op) == 3

    @property
    def n_components(self) -> int:
        return _n_components(self.family, self.op)


def _n_components(family, op):
    if family == "RWG":
        return {"id": 3, "nx": 3, "div": 1}.get(op, 0)
    return {"id": 1, "grad": 3, "ntimes": 3}.get(op, 0)


class _Layout:
    """Dof numbering of a family on a mesh."""

    def __init__(self, mesh: Mesh, family: str):
        self.mesh = mesh
        self.family = family
        ne = mesh.n_elements
        if family == "P0":
            self.elem_dofs = np.arange(ne)[:, None]
            self.n_dofs = ne
        elif family == "P1":
            self.elem_dofs = mesh.elements
            self.n_dofs = mesh.n_vertices
        elif family == "P2":
            self.elem_dofs = np.hstack([mesh.elements, mesh.n_vertices + mesh.element_edges])
            self.n_dofs = mesh.n_vertices + len(mesh.edges)
        else:
            self._rwg()

    def _rwg(self):
        mesh = self.mesh
        ee = mesh.element_edges  # (Ne, 3), local edge i opposite vertex i
        count = np.bincount(ee.ravel(), minlength=len(mesh.edges))
        if np.any(count > 2):
            bad = int(np.flatnonzero(count > 2)[0])
            raise ValueError(f"RWG needs a manifold mesh; edge {mesh.edges[bad].tolist()} "
                             f"is shared by {count[bad]} triangles")
        interior = np.flatnonzero(count == 2)
        index = np.full(len(mesh.edges), -1, dtype=np.int64)
        index[interior] = np.arange(len(interior))
        self.elem_dofs = index[ee]
        # the lower-numbered triangle of each edge carries the + sign
        flat = ee.ravel()
        order = np.argsort(flat, kind="stable")  # element-major input, so ties keep element order
        first = np.zeros(len(flat), dtype=bool)
        sorted_edges = flat[order]
        first[order[np.r_[True, sorted_edges[1:] != sorted_edges[:-1]]]] = True
        self.signs = np.where(first, 1.0, -1.0).reshape(ee.shape)
        self.edge_of_dof = interior
        self.n_dofs = len(interior)

    @cached_property
    def locations(self) -> np.ndarray:
        mesh = self.mesh
        if self.family == "P0":
            return mesh.centroids
        if self.family == "P1":
            return mesh.vertices
        mid = mesh.vertices[mesh.edges].mean(axis=1)
        if self.family == "P2":
            return np.vstack([mesh.vertices, mid])
        return mid[self.edge_of_dof]


_LAYOUTS: dict = {}


def _layout(mesh, family) -> _Layout:
    key = (id(mesh), family)
    hit = _LAYOUTS.get(key)
    if hit is None or hit.mesh is not mesh:
        if len(_LAYOUTS) > 64:
            _LAYOUTS.clear()
        hit = _LAYOUTS[key] = _Layout(mesh, family)
    return hit


def make_fem(mesh: Mesh, family_name: str) -> FemSpace:
    """Finite element space of the given family on ``mesh``."""
    if family_name not in FAMILIES:
        raise ValueError(f"unknown finite element family {family_name!r}; expected one of {FAMILIES}")
    if family_name != "P0" and mesh.n_elements == 0:
        raise ValueError("cannot build a space on an empty mesh")
    space = FemSpace(mesh, family_name)
    space._layout  # number dofs eagerly so errors surface here
    return space


def grad(space: FemSpace) -> FemSpace:
    return replace(space, op="grad")


def div(space: FemSpace) -> FemSpace:
    return replace(space, op="div")


def nx(space: FemSpace) -> FemSpace:
    """n x (value), for RWG spaces."""
    return replace(space, op="nx")


def ntimes(space: FemSpace) -> FemSpace:
    """n (value), for scalar spaces on surfaces."""
    return replace(space, op="ntimes")


def dof_locations(space: FemSpace) -> np.ndarray:
    """Geometric location of every dof of the full (unconstrained) space."""
    return space._layout.locations


def dirichlet(space: FemSpace, boundary: Mesh) -> FemSpace:
    """Constrain the dofs of ``space`` that lie on ``boundary``.

    Dofs are matched geometrically to the dof locations of the same family
    on the boundary mesh.
    """
    if space.family == "RWG":
        raise UnsupportedOperationError("dirichlet constraints are only supported for scalar families")
    if boundary.n_elements == 0:
        return space
    own = dof_locations(space)
    if space.family == "P0":
        target = boundary.centroids
    else:
        target = _layout(boundary, space.family).locations
    # the same vertex in two meshes can differ by rounding of the
    # construction, so use a slightly looser tolerance than merging
    tol = max(merge_tolerance(space.mesh), 1e-12) * 100
    hit = match_vertices(own, target, tol)
    new = np.flatnonzero(hit >= 0)
    return replace(space, constrained=np.union1d(space.constrained, new))


def elimination_map(space: FemSpace) -> csr_matrix:
    """(N_full, N_free) matrix with one unit entry per free dof."""
    free = space.free_dofs
    n = space.n_dofs_full
    return csr_matrix((np.ones(len(free)), (free, np.arange(len(free)))), shape=(n, len(free)))


def _local_values(space: FemSpace, elem: np.ndarray, lam: np.ndarray, points: np.ndarray):
    """Local dof indices (M, n_loc) and op-applied values (M, n_loc, n_comp).

    Dof index -1 marks a local function that is not a dof (RWG boundary edge).
    """
    mesh = space.mesh
    lay = space._layout
    fam, op = space.family, space.op
    ncomp = _n_components(fam, op)
    if ncomp == 0:
        raise UnsupportedOperationError(f"operator {op!r} is not defined for {fam} spaces")
    if op == "ntimes" and mesh.dim != 2:
        raise UnsupportedOperationError("ntimes needs a dimension-2 (surface) mesh")
    dofs = lay.elem_dofs[elem]
    m = len(elem)
    if fam == "P0":
        vals = np.ones((m, 1))
        grads = np.zeros((m, 1, 3))
    elif fam == "P1":
        vals = lam
        grads = mesh.bary_gradients[elem]
    elif fam == "P2":
        g = mesh.bary_gradients[elem]  # (M, d+1, 3)
        loc = LOCAL_EDGES[mesh.dim]
        la, lb = lam[:, loc[:, 0]], lam[:, loc[:, 1]]
        ga, gb = g[:, loc[:, 0]], g[:, loc[:, 1]]
        vals = np.hstack([lam * (2.0 * lam - 1.0), 4.0 * la * lb])
        grads = np.concatenate([(4.0 * lam - 1.0)[..., None] * g,
                                4.0 * (la[..., None] * gb + lb[..., None] * ga)], axis=1)
    else:
        s = lay.signs[elem]  # (M, 3)
        verts = mesh.vertices[mesh.elements[elem]]  # (M, 3, 3)
        ledge = np.linalg.norm(verts[:, [2, 0, 1]] - verts[:, [1, 2, 0]], axis=2)  # edge i opposite vertex i
        area = mesh.measures[elem]
        coef = s * ledge / (2.0 * area[:, None])
        if op == "div":
            return dofs, (2.0 * coef)[..., None]
        val = coef[..., None] * (points[:, None, :] - verts)
        if op == "nx":
            val = np.cross(mesh.normals[elem][:, None, :], val)
        return dofs, val
    if op == "id":
        return dofs, vals[..., None]
    if op == "grad":
        return dofs, grads
    n = mesh.normals[elem]
    return dofs, vals[..., None] * n[:, None, :]


def _trace_coordinates(space: FemSpace, dom: Domain):
    """Element of the space mesh and barycentrics for each quadrature point."""
    qs = dom.quadrature()
    if dom.mesh is space.mesh:
        return qs.element_of, qs.bary, qs.points
    parents = space.mesh.parent_elements(dom.mesh)
    elem = parents[qs.element_of]
    return elem, space.mesh.barycentric(elem, qs.points), qs.points


def _assemble(space: FemSpace, dofs, vals, n_rows) -> EvalMatrix:
    n_loc, ncomp = vals.shape[1], vals.shape[2]
    rows = np.repeat(np.arange(n_rows), n_loc)
    cols = dofs.ravel()
    keep = cols >= 0
    # map full dofs to free-dof columns
    if len(space.constrained):
        col_map = np.full(space.n_dofs_full, -1, dtype=np.int64)
        free = space.free_dofs
        col_map[free] = np.arange(len(free))
        cols = col_map[cols]
        keep &= cols >= 0
    rows, cols = rows[keep], cols[keep]
    out = []
    for c in range(ncomp):
        data = vals[:, :, c].ravel()[keep]
        mat = csr_matrix((data, (rows, cols)), shape=(n_rows, space.n_dofs))
        mat.sum_duplicates()
        mat.sort_indices()
        out.append(mat)
    return EvalMatrix(tuple(out))


def eval_matrix(space: FemSpace, dom: Domain, op: str | None = None) -> EvalMatrix:
    """Sparse evaluation of the (op-applied) basis at the quadrature points.

    Parameters
    ----------
    space : FemSpace
    dom : Domain
        Domain on ``space.mesh`` or on a sub-mesh of it.
    op : str, optional
        Overrides ``space.op``.
    """
    if op is not None:
        space = replace(space, op=op)
    elem, lam, pts = _trace_coordinates(space, dom)
    dofs, vals = _local_values(space, elem, lam, pts)
    return _assemble(space, dofs, vals, len(pts))


def eval_at(space: FemSpace, points: np.ndarray, elem: np.ndarray | None = None) -> EvalMatrix:
    """Evaluation matrix at arbitrary points of the space mesh."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if elem is None:
        elem = space.mesh.locate(points)
    lam = space.mesh.barycentric(elem, points)
    dofs, vals = _local_values(space, elem, lam, points)
    return _assemble(space, dofs, vals, len(points))


def interpolate(space: FemSpace, coefficients: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate sum_j c_j (op phi_j) at ``points``.

    ``coefficients`` may cover the free dofs or the full space.  Returns an
    (n_points,) array for scalar results and (n_points, 3) otherwise.
    """
    c = np.asarray(coefficients)
    full = replace(space, constrained=np.zeros(0, dtype=np.int64))
    if len(c) == space.n_dofs and len(space.constrained):
        c = elimination_map(space) @ c
    elif len(c) != space.n_dofs_full:
        raise ValueError(f"expected {space.n_dofs} or {space.n_dofs_full} coefficients, got {len(c)}")
    E = eval_at(full, points)
    res = np.stack([m @ c for m in E], axis=1)
    return res[:, 0] if res.shape[1] == 1 else res


def local_basis(space: FemSpace, mesh: Mesh, elem: np.ndarray, points: np.ndarray):
    """Local basis of ``space`` at points lying in elements ``elem`` of ``mesh``.

    ``mesh`` is the space mesh or a sub-mesh of it.  Returns free-dof indices
    (M, n_loc), with -1 for local functions that are not free dofs, and the
    op-applied values (M, n_loc, n_comp).
    """
    elem = np.asarray(elem, dtype=np.int64)
    points = np.asarray(points, dtype=float)
    if mesh is not space.mesh:
        elem = space.mesh.parent_elements(mesh)[elem]
    lam = space.mesh.barycentric(elem, points)
    dofs, vals = _local_values(space, elem, lam, points)
    dofs = np.where(dofs >= 0, dofs, -1)
    if len(space.constrained):
        col_map = np.full(space.n_dofs_full, -1, dtype=np.int64)
        col_map[space.free_dofs] = np.arange(space.n_dofs)
        dofs = np.where(dofs >= 0, col_map[np.maximum(dofs, 0)], -1)
    return dofs, vals
