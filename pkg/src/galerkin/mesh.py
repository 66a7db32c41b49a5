"""Simplicial meshes of dimension 1 to 3 embedded in 3-space.

A mesh is three tables: vertex coordinates, element connectivity and an
integer color per element.  Builders produce deterministic structured meshes
of simple shapes (square, disk, box, sphere); everything else derives from
the tables.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# Local vertex pairs of the edges of a simplex.  For triangles, edge i is
# opposite vertex i.
LOCAL_EDGES = {
    1: np.array([[0, 1]]),
    2: np.array([[1, 2], [2, 0], [0, 1]]),
    3: np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]),
}

# Facet i is opposite vertex i and oriented outward for a positively
# oriented simplex.
LOCAL_FACETS = {
    2: np.array([[1, 2], [2, 0], [0, 1]]),
    3: np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]]),
}


class EdgeStats(NamedTuple):
    """Edge length statistics, ordered (min, max, mean, std)."""

    min_len: float
    max_len: float
    mean_len: float
    std_len: float


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh.

    Parameters
    ----------
    vertices : (Nv, 3) array_like
        Vertex coordinates.  Two-column input is padded with z = 0.
    elements : (Ne, d+1) array_like
        Zero-based vertex indices of each element, d in {1, 2, 3}.
    colors : (Ne,) array_like, optional
        Integer tag per element, zero by default.
    """

    vertices: np.ndarray
    elements: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        vtx = np.array(self.vertices, dtype=float)
        if vtx.size == 0:
            vtx = np.zeros((0, 3))
        if vtx.shape[1] == 2:
            vtx = np.hstack([vtx, np.zeros((len(vtx), 1))])
        if vtx.shape[1] != 3:
            raise ValueError(f"vertices must have 3 columns, got {vtx.shape[1]}")
        elt = np.asarray(self.elements)
        if elt.ndim != 2 or elt.shape[1] not in (2, 3, 4):
            raise ValueError(f"elements must be an (Ne, d+1) table with d in 1..3, got shape {elt.shape}")
        elt = elt.astype(np.int64)
        if elt.size and (elt.min() < 0 or elt.max() >= len(vtx)):
            raise ValueError("element vertex index out of range")
        col = np.zeros(len(elt), dtype=np.int64) if self.colors is None else np.asarray(self.colors, dtype=np.int64).ravel()
        if len(col) != len(elt):
            raise ValueError("colors must have one entry per element")
        for arr in (vtx, elt, col):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", vtx)
        object.__setattr__(self, "elements", elt)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "_parent_cache", {})

    def __repr__(self):
        return f"Mesh(dim={self.dim}, n_vertices={self.n_vertices}, n_elements={self.n_elements})"

    @property
    def dim(self) -> int:
        return self.elements.shape[1] - 1

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def __len__(self):
        return self.n_elements

    @cached_property
    def jacobians(self) -> np.ndarray:
        """(Ne, 3, d) edge vectors v_i - v_0."""
        v = self.vertices[self.elements]
        return np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))

    @cached_property
    def measures(self) -> np.ndarray:
        """Length, area or volume of each element."""
        J = self.jacobians
        if self.dim == 1:
            return np.linalg.norm(J[:, :, 0], axis=1)
        if self.dim == 2:
            return 0.5 * np.linalg.norm(np.cross(J[:, :, 0], J[:, :, 1]), axis=1)
        return np.abs(np.linalg.det(J)) / 6.0

    @cached_property
    def centroids(self) -> np.ndarray:
        if self.n_elements == 0:
            return np.zeros((0, 3))
        return self.vertices[self.elements].mean(axis=1)

    @cached_property
    def circumradii(self) -> np.ndarray:
        J = self.jacobians
        G = np.einsum("eki,ekj->eij", J, J)
        rhs = 0.5 * np.einsum("eii->ei", G)
        a = np.linalg.solve(G, rhs[..., None])[..., 0]
        return np.linalg.norm(np.einsum("eki,ei->ek", J, a), axis=1)

    @cached_property
    def bary_gradients(self) -> np.ndarray:
        """(Ne, d+1, 3) gradients of the barycentric coordinates.

        On manifolds these are tangential gradients, computed from the
        pseudo-inverse of the element Jacobian.
        """
        J = self.jacobians
        G = np.einsum("eki,ekj->eij", J, J)
        pinv = np.linalg.solve(G, np.transpose(J, (0, 2, 1)))  # (Ne, d, 3)
        return np.concatenate([-pinv.sum(axis=1, keepdims=True), pinv], axis=1)

    def barycentric(self, elem: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of ``points`` in elements ``elem``.

        Points off the affine hull of an element are projected onto it.
        """
        grads = self.bary_gradients[elem]
        v0 = self.vertices[self.elements[elem, 0]]
        lam = np.einsum("eij,ej->ei", grads[:, 1:], points - v0)
        return np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        """Unit normal per triangle, right-hand rule on the vertex order."""
        if self.dim != 2:
            raise ValueError("normals are defined for surface (dimension 2) meshes only")
        J = self.jacobians
        n = np.cross(J[:, :, 0], J[:, :, 1])
        nrm = np.linalg.norm(n, axis=1)
        bad = np.flatnonzero(nrm <= 1e-14 * max(self.diameter, 1e-300) ** 2)
        if len(bad):
            raise ValueError(f"degenerate triangle {bad[0]} has no normal")
        return n / nrm[:, None]

    @cached_property
    def edges(self) -> np.ndarray:
        """(Nedge, 2) unique vertex pairs, each sorted ascending."""
        return self._edge_tables[0]

    @cached_property
    def element_edges(self) -> np.ndarray:
        """(Ne, n_local_edges) edge index of each local edge."""
        return self._edge_tables[1]

    @cached_property
    def _edge_tables(self):
        loc = LOCAL_EDGES[self.dim]
        pairs = np.sort(self.elements[:, loc], axis=2).reshape(-1, 2)
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros((0, len(loc)), dtype=np.int64)
        edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        return edges, inv.reshape(self.n_elements, len(loc))

    @cached_property
    def diameter(self) -> float:
        """Length of the bounding-box diagonal."""
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def total_measure(self) -> float:
        return float(self.measures.sum())

    def parent_elements(self, sub: "Mesh") -> np.ndarray:
        """Element of ``self`` containing each element of ``sub``.

        ``sub`` is either a subset of the elements of ``self`` or a set of
        facets (for instance the boundary).  Vertices are matched
        geometrically.
        """
        if sub is self:
            return np.arange(self.n_elements)
        key = id(sub)
        cached = self._parent_cache.get(key)
        if cached is not None and cached[0] is sub:
            return cached[1]
        vmap = match_vertices(sub.vertices, self.vertices, merge_tolerance(self))
        if np.any(vmap < 0):
            raise ValueError("mesh is not a sub-mesh: unmatched vertices")
        sub_elt = np.sort(vmap[sub.elements], axis=1)
        if sub.dim == self.dim:
            own = np.sort(self.elements, axis=1)
            owner = np.arange(self.n_elements)
        elif sub.dim == self.dim - 1:
            loc = LOCAL_FACETS[self.dim]
            own = np.sort(self.elements[:, loc], axis=2).reshape(-1, self.dim)
            owner = np.repeat(np.arange(self.n_elements), len(loc))
        else:
            raise ValueError(f"cannot restrict a dimension-{self.dim} mesh to dimension {sub.dim}")
        lookup = {tuple(row): e for row, e in zip(own.tolist(), owner.tolist())}
        try:
            parents = np.array([lookup[tuple(row)] for row in sub_elt.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"mesh is not a sub-mesh: element {exc.args[0]} not found") from None
        self._parent_cache[key] = (sub, parents)
        return parents

    def locate(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Index of an element containing each point; raises if outside."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tree = cKDTree(self.centroids)
        k = min(self.n_elements, 24)
        _, cand = tree.query(points, k=k)
        cand = cand.reshape(len(points), k)
        scale = max(self.diameter, 1e-300)
        found = np.full(len(points), -1, dtype=np.int64)
        for c in range(k):
            todo = np.flatnonzero(found < 0)
            if len(todo) == 0:
                break
            e = cand[todo, c]
            lam = self.barycentric(e, points[todo])
            proj = np.einsum("ei,eik->ek", lam, self.vertices[self.elements[e]])
            ok = (lam.min(axis=1) >= -tol) & (np.linalg.norm(proj - points[todo], axis=1) <= tol * scale)
            found[todo[ok]] = e[ok]
        if np.any(found < 0):
            i = int(np.flatnonzero(found < 0)[0])
            raise ValueError(f"point {i} at {points[i].tolist()} lies outside the mesh")
        return found


def merge_tolerance(mesh: Mesh) -> float:
    """Default vertex merge tolerance: 1e-12 of the bounding-box diagonal."""
    return 1e-12 * mesh.diameter


def match_vertices(points: np.ndarray, vertices: np.ndarray, tol: float) -> np.ndarray:
    """Index of the vertex within ``tol`` of each point, -1 where none."""
    if len(vertices) == 0 or len(points) == 0:
        return np.full(len(points), -1, dtype=np.int64)
    dist, idx = cKDTree(vertices).query(points, k=1)
    return np.where(dist <= tol, idx, -1).astype(np.int64)


def _empty(dim: int) -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, dim + 1), dtype=np.int64))


def _check_count(n_target, minimum):
    if int(n_target) != n_target or n_target < minimum:
        raise ValueError(f"n_target must be an integer >= {minimum}, got {n_target}")


def _check_sizes(size, n):
    size = np.asarray(size, dtype=float).ravel()
    if size.shape != (n,) or np.any(~np.isfinite(size)) or np.any(size <= 0):
        raise ValueError(f"size must be {n} positive lengths, got {size.tolist()}")
    return size


def build_square(n_target: int, size: Sequence[float] = (1.0, 1.0)) -> Mesh:
    """Structured triangle mesh of a rectangle centered at the origin, z = 0."""
    _check_count(n_target, 4)
    Lx, Ly = _check_sizes(size, 2)
    nx = max(2, int(round(np.sqrt(n_target * Lx / Ly))))
    ny = max(2, int(round(n_target / nx)))
    x = np.linspace(-Lx / 2, Lx / 2, nx)
    y = np.linspace(-Ly / 2, Ly / 2, ny)
    X, Y = np.meshgrid(x, y, indexing="xy")
    vtx = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="xy")
    v00 = (j * nx + i).ravel()
    v10, v01, v11 = v00 + 1, v00 + nx, v00 + nx + 1
    elt = np.vstack([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    return Mesh(vtx, elt)


def build_disk(n_target: int, radius: float = 1.0) -> Mesh:
    """Triangle mesh of a disk from concentric rings of 6i vertices."""
    _check_count(n_target, 4)
    if not np.isfinite(radius) or radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    counts = {R: 1 + 3 * R * (R + 1) for R in range(1, int(np.sqrt(n_target)) + 3)}
    n_rings = min(counts, key=lambda R: (abs(counts[R] - n_target), R))
    vtx = [np.zeros((1, 3))]
    rings = [np.array([0])]
    start = 1
    for i in range(1, n_rings + 1):
        theta = 2 * np.pi * np.arange(6 * i) / (6 * i)
        r = radius * i / n_rings
        vtx.append(np.column_stack([r * np.cos(theta), r * np.sin(theta), np.zeros(6 * i)]))
        rings.append(np.arange(start, start + 6 * i))
        start += 6 * i
    vtx = np.vstack(vtx)
    tris = []
    for i in range(1, n_rings + 1):
        inner, outer = rings[i - 1], rings[i]
        m, n = len(inner), len(outer)
        if m == 1:
            tris.extend([inner[0], outer[b], outer[(b + 1) % n]] for b in range(n))
            continue
        a = b = 0
        while a < m or b < n:
            if b < n and (a == m or (b + 1) / n <= (a + 1) / m):
                tris.append([inner[a % m], outer[b], outer[(b + 1) % n]])
                b += 1
            else:
                tris.append([inner[a], outer[b % n], inner[(a + 1) % m]])
                a += 1
    return Mesh(vtx, np.array(tris))


def build_cube(n_target: int, size: Sequence[float] = (1.0, 1.0, 1.0)) -> Mesh:
    """Tetrahedral mesh of the box [0,Lx]x[0,Ly]x[0,Lz].

    The grid has (n+1)^3 vertices with (n+1)^3 nearest to ``n_target``; each
    hexahedral cell is split into the 6 tetrahedra sharing its main diagonal.
    """
    _check_count(n_target, 8)
    L = _check_sizes(size, 3)
    m = max(2, min(range(2, int(round(n_target ** (1 / 3))) + 3), key=lambda p: (abs(p ** 3 - n_target), p)))
    axes = [np.linspace(0, L[a], m) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    vtx = np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])
    i, j, k = np.meshgrid(np.arange(m - 1), np.arange(m - 1), np.arange(m - 1), indexing="ij")
    base = (i + m * (j + m * k)).ravel(order="F")
    step = np.array([1, m, m * m])
    tets = []
    for perm in itertools.permutations(range(3)):
        a, b, _ = perm
        t = [base, base + step[a], base + step[a] + step[b], base + step.sum()]
        # orientation follows the permutation parity
        unit = np.eye(3)
        corners = np.array([np.zeros(3), unit[a], unit[a] + unit[b], np.ones(3)])
        if np.linalg.det((corners[1:] - corners[0]).T) < 0:
            t[2], t[3] = t[3], t[2]
        tets.append(np.column_stack(t))
    return Mesh(vtx, np.vstack(tets))


def _icosahedron():
    p = (1 + np.sqrt(5)) / 2
    vtx = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                    [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                    [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=float)
    tri = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return vtx / np.linalg.norm(vtx, axis=1, keepdims=True), tri


def build_sphere(n_target: int, radius: float = 1.0) -> Mesh:
    """Surface mesh of a sphere by repeated 4-way icosahedron subdivision.

    Vertex counts are 10*4^L + 2; the first level reaching ``n_target`` is
    used.  Triangles are oriented outward.
    """
    _check_count(n_target, 12)
    if not np.isfinite(radius) or radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    vtx, tri = _icosahedron()
    while len(vtx) < n_target:
        edges, inv = np.unique(np.sort(tri[:, [[1, 2], [2, 0], [0, 1]]], axis=2).reshape(-1, 2),
                               axis=0, return_inverse=True)
        mid = vtx[edges].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        e = inv.reshape(-1, 3) + len(vtx)
        a, b, c = tri.T
        tri = np.vstack([np.column_stack([a, e[:, 2], e[:, 1]]),
                         np.column_stack([e[:, 2], b, e[:, 0]]),
                         np.column_stack([e[:, 1], e[:, 0], c]),
                         np.column_stack([e[:, 0], e[:, 1], e[:, 2]])])
        vtx = np.vstack([vtx, mid])
    mesh = Mesh(radius * vtx, tri)
    flip = np.einsum("ij,ij->i", mesh.normals, mesh.centroids) < 0
    if flip.any():
        tri = tri.copy()
        tri[flip, :2] = tri[flip, 1::-1]
        mesh = Mesh(radius * vtx, tri)
    return mesh


def _restrict_vertices(vertices, elements, colors):
    used = np.unique(elements)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(vertices[used], remap[elements], colors)


def boundary(mesh: Mesh) -> Mesh:
    """Facets belonging to exactly one element, oriented outward.

    Facets keep the color of their element; vertices are renumbered in
    their original order.
    """
    if mesh.dim < 2:
        raise ValueError("boundary requires a mesh of dimension 2 or 3")
    if mesh.n_elements == 0:
        return _empty(mesh.dim - 1)
    loc = LOCAL_FACETS[mesh.dim]
    facets = mesh.elements[:, loc].reshape(-1, mesh.dim)
    _, inv, counts = np.unique(np.sort(facets, axis=1), axis=0, return_inverse=True, return_counts=True)
    keep = counts[inv.ravel()] == 1
    if not keep.any():
        return _empty(mesh.dim - 1)
    owner = np.repeat(np.arange(mesh.n_elements), len(loc))[keep]
    return _restrict_vertices(mesh.vertices, facets[keep], mesh.colors[owner])


def clean(mesh: Mesh, tol: float | None = None) -> Mesh:
    """Merge close vertices, drop degenerate, duplicate and unused entities.

    Vertices closer than ``tol`` are merged onto the lexicographically
    smallest of their group.  Surviving vertices and elements keep their
    relative order, so cleaning a clean mesh returns identical tables.
    """
    if tol is None:
        tol = merge_tolerance(mesh)
    if tol < 0:
        raise ValueError("tol must be non-negative")
    vtx, elt = mesh.vertices, mesh.elements
    nv = len(vtx)
    rep = np.arange(nv)
    if nv:
        pairs = np.zeros((0, 2), dtype=np.int64)
        if tol > 0:
            pairs = cKDTree(vtx).query_pairs(tol, output_type="ndarray")
        _, first, inv = np.unique(vtx, axis=0, return_index=True, return_inverse=True)
        links = np.vstack([pairs, np.column_stack([np.arange(nv), first[inv.ravel()]])])
        graph = coo_matrix((np.ones(len(links)), (links[:, 0], links[:, 1])), shape=(nv, nv))
        _, labels = connected_components(graph, directed=False)
        # lexicographically smallest member of each group
        order = np.lexsort(vtx.T[::-1])
        _, pos = np.unique(labels[order], return_index=True)
        rep = order[pos][labels]
    elt = rep[elt]
    ok = np.ones(len(elt), dtype=bool)
    if len(elt):
        srt = np.sort(elt, axis=1)
        ok &= np.all(np.diff(srt, axis=1) > 0, axis=1)
        _, first = np.unique(srt, axis=0, return_index=True)
        uniq = np.zeros(len(elt), dtype=bool)
        uniq[first] = True
        ok &= uniq
        probe = Mesh(vtx, elt)
        scale = max(mesh.diameter, 1e-300) ** mesh.dim
        ok &= probe.measures > 1e-14 * scale
    return _restrict_vertices(vtx, elt[ok], mesh.colors[ok])


def union(a: Mesh, b: Mesh) -> Mesh:
    """Concatenate two meshes of equal dimension and clean the result."""
    if a.dim != b.dim:
        raise ValueError(f"cannot unite meshes of dimension {a.dim} and {b.dim}")
    merged = Mesh(np.vstack([a.vertices, b.vertices]),
                  np.vstack([a.elements, b.elements + a.n_vertices]),
                  np.concatenate([a.colors, b.colors]))
    return clean(merged, merge_tolerance(merged))


def edge_stats(mesh: Mesh) -> EdgeStats:
    """Statistics of the unique edge lengths of a mesh."""
    if mesh.n_elements == 0:
        raise ValueError("edge_stats of an empty mesh")
    e = mesh.edges
    lengths = np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)
    return EdgeStats(float(lengths.min()), float(lengths.max()), float(lengths.mean()), float(lengths.std()))


def normals(mesh: Mesh) -> np.ndarray:
    return mesh.normals


def swap(mesh: Mesh) -> Mesh:
    """Exchange the first two vertices of every element (flips normals)."""
    if mesh.dim != 2:
        raise ValueError("swap is defined for surface meshes")
    elt = mesh.elements.copy()
    elt[:, [0, 1]] = elt[:, [1, 0]]
    return Mesh(mesh.vertices, elt, mesh.colors)


def translate(mesh: Mesh, shift: Sequence[float]) -> Mesh:
    return Mesh(mesh.vertices + np.asarray(shift, dtype=float), mesh.elements, mesh.colors)


def transform(mesh: Mesh, matrix: np.ndarray) -> Mesh:
    """Apply a linear map to the vertices; orientation of volume meshes is restored."""
    A = np.asarray(matrix, dtype=float)
    elt = mesh.elements
    if mesh.dim == 3 and np.linalg.det(A) < 0:
        elt = elt.copy()
        elt[:, [0, 1]] = elt[:, [1, 0]]
    return Mesh(mesh.vertices @ A.T, elt, mesh.colors)
