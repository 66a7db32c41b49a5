"""Gmsh v2.2 ASCII mesh reader/writer and legacy VTK writer."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping

import numpy as np

from .mesh import Mesh, clean

logger = logging.getLogger(__name__)

# gmsh element type -> (dimension, node count)
GMSH_TYPES = {1: (1, 2), 2: (2, 3), 4: (3, 4)}
GMSH_TYPE_OF_DIM = {1: 1, 2: 2, 3: 4}
VTK_CELL_TYPE = {1: 3, 2: 5, 3: 10}


class MeshFormatError(ValueError):
    """Malformed mesh file."""


class _Lines:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, section):
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise MeshFormatError(f"line {self.pos}: unexpected end of file in {section} section")

    def fail(self, msg):
        raise MeshFormatError(f"line {self.pos}: {msg}")


def read_msh(path) -> Mesh:
    """Read a Gmsh v2.2 ASCII file.

    Only the highest-dimensional simplices present (segments, triangles or
    tetrahedra) form the mesh; their first tag (the physical group) becomes
    the color.  Other element types are skipped and counted in a warning.
    The mesh is cleaned on load.
    """
    src = _Lines(Path(path).read_text())
    nodes = ids = None
    blocks = {}
    skipped = 0
    seen_format = False
    while True:
        try:
            head = src.next("header")
        except MeshFormatError:
            break
        if head == "$MeshFormat":
            fields = src.next("$MeshFormat").split()
            if len(fields) < 3:
                src.fail("bad $MeshFormat line")
            if not fields[0].startswith("2"):
                src.fail(f"unsupported msh version {fields[0]} (2.2 expected)")
            if fields[1] != "0":
                src.fail("binary msh files are not supported")
            if src.next("$MeshFormat") != "$EndMeshFormat":
                src.fail("expected $EndMeshFormat")
            seen_format = True
        elif head == "$Nodes":
            n = _int(src, src.next("$Nodes"), "$Nodes")
            ids = np.empty(n, dtype=np.int64)
            nodes = np.empty((n, 3))
            for i in range(n):
                parts = src.next("$Nodes").split()
                if len(parts) < 4:
                    src.fail("node line needs an id and 3 coordinates")
                try:
                    ids[i] = int(parts[0])
                    nodes[i] = [float(p) for p in parts[1:4]]
                except ValueError:
                    src.fail(f"cannot parse node line {parts!r}")
            if src.next("$Nodes") != "$EndNodes":
                src.fail("expected $EndNodes")
        elif head == "$Elements":
            n = _int(src, src.next("$Elements"), "$Elements")
            for _ in range(n):
                parts = src.next("$Elements").split()
                try:
                    vals = [int(p) for p in parts]
                except ValueError:
                    src.fail(f"cannot parse element line {parts!r}")
                if len(vals) < 3:
                    src.fail("element line too short")
                etype, ntags = vals[1], vals[2]
                if etype not in GMSH_TYPES:
                    skipped += 1
                    continue
                dim, nn = GMSH_TYPES[etype]
                tags = vals[3:3 + ntags]
                conn = vals[3 + ntags:]
                if len(conn) != nn:
                    src.fail(f"element type {etype} needs {nn} nodes, got {len(conn)}")
                blocks.setdefault(dim, []).append((tags[0] if tags else 0, conn))
            if src.next("$Elements") != "$EndElements":
                src.fail("expected $EndElements")
        elif head.startswith("$"):
            # skip unknown sections
            end = "$End" + head[1:]
            while src.next(head) != end:
                pass
        else:
            src.fail(f"unexpected content {head!r}")
    if not seen_format:
        raise MeshFormatError("line 1: missing $MeshFormat section")
    if nodes is None:
        raise MeshFormatError(f"line {src.pos}: missing $Nodes section")
    if not blocks:
        raise MeshFormatError(f"line {src.pos}: no segment, triangle or tetrahedron elements")
    dim = max(blocks)
    lower = sum(len(v) for d, v in blocks.items() if d < dim)
    if skipped:
        logger.warning("read_msh: skipped %d elements of unsupported type", skipped)
    if lower:
        logger.info("read_msh: ignored %d lower-dimensional elements", lower)
    lookup = {int(v): i for i, v in enumerate(ids)}
    try:
        elt = np.array([[lookup[v] for v in conn] for _, conn in blocks[dim]], dtype=np.int64)
    except KeyError as exc:
        raise MeshFormatError(f"element references unknown node {exc.args[0]}") from None
    col = np.array([tag for tag, _ in blocks[dim]], dtype=np.int64)
    return clean(Mesh(nodes, elt, col))


def _int(src, text, section):
    try:
        return int(text.split()[0])
    except (ValueError, IndexError):
        src.fail(f"expected an entity count in {section}")


def write_msh(path, mesh: Mesh) -> None:
    """Write a Gmsh v2.2 ASCII file; colors go to both tags."""
    etype = GMSH_TYPE_OF_DIM[mesh.dim]
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    out += [f"{i + 1} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(mesh.vertices.tolist())]
    out += ["$EndNodes", "$Elements", str(mesh.n_elements)]
    for i, (conn, c) in enumerate(zip(mesh.elements.tolist(), mesh.colors.tolist())):
        out.append(f"{i + 1} {etype} 2 {c} {c} " + " ".join(str(v + 1) for v in conn))
    out += ["$EndElements", ""]
    Path(path).write_text("\n".join(out))


def write_vtk(path, mesh: Mesh, fields: Mapping[str, np.ndarray] | None = None, title: str = "galerkin") -> None:
    """Write a legacy ASCII VTK unstructured grid.

    Arrays of length Nv become POINT_DATA, arrays of length Ne CELL_DATA.
    Complex arrays are split into ``<name>_re`` and ``<name>_im``.
    """
    fields = dict(fields or {})
    point, cell = {}, {}
    for name, arr in fields.items():
        arr = np.asarray(arr).ravel()
        if len(arr) == mesh.n_vertices:
            target = point
        elif len(arr) == mesh.n_elements:
            target = cell
        else:
            raise ValueError(f"field {name!r} has length {len(arr)}, expected {mesh.n_vertices} (vertices) "
                             f"or {mesh.n_elements} (elements)")
        if np.iscomplexobj(arr):
            target[f"{name}_re"] = arr.real
            target[f"{name}_im"] = arr.imag
        else:
            target[name] = arr.astype(float)
    nn = mesh.dim + 1
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (nn + 1)}")
    out += [f"{nn} " + " ".join(map(str, conn)) for conn in mesh.elements.tolist()]
    out.append(f"CELL_TYPES {mesh.n_elements}")
    out += [str(VTK_CELL_TYPE[mesh.dim])] * mesh.n_elements
    for header, data, n in (("POINT_DATA", point, mesh.n_vertices), ("CELL_DATA", cell, mesh.n_elements)):
        if not data:
            continue
        out.append(f"{header} {n}")
        for name, arr in data.items():
            out += [f"SCALARS {name.replace(' ', '_')} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in arr]
    out.append("")
    Path(path).write_text("\n".join(out))
