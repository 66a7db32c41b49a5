import logging

import numpy as np
import pytest

from galerkin.fileio import MeshFormatError, read_msh, write_msh, write_vtk
from galerkin.mesh import build_cube, build_sphere, build_square

ONE_TET = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 0 1 0
4 0 0 1
$EndNodes
$Elements
3
1 15 2 0 1 1
2 2 2 3 3 1 2 3
3 4 2 7 1 1 2 3 4
$EndElements
"""


def test_roundtrip_cube(tmp_path):
    m = build_cube(27, [1, 1, 1])
    p = tmp_path / "cube.msh"
    write_msh(p, m)
    r = read_msh(p)
    assert np.allclose(r.vertices, m.vertices, atol=1e-9)
    assert np.array_equal(r.elements, m.elements)


def test_roundtrip_surface_colors(tmp_path):
    m = build_sphere(42)
    m = type(m)(m.vertices, m.elements, np.arange(m.n_elements) % 3)
    p = tmp_path / "s.msh"
    write_msh(p, m)
    r = read_msh(p)
    assert np.array_equal(r.colors, m.colors)


def test_physical_tag_and_skipped(tmp_path, caplog):
    p = tmp_path / "tet.msh"
    p.write_text(ONE_TET)
    with caplog.at_level(logging.WARNING):
        m = read_msh(p)
    assert m.dim == 3 and m.n_elements == 1
    assert m.colors.tolist() == [7]
    assert "skipped 1" in caplog.text


def test_truncated(tmp_path):
    p = tmp_path / "bad.msh"
    p.write_text(ONE_TET[: ONE_TET.index("3 0 1 0")])
    with pytest.raises(MeshFormatError, match=r"line \d+.*\$Nodes"):
        read_msh(p)


def test_bad_node_line(tmp_path):
    p = tmp_path / "bad.msh"
    p.write_text(ONE_TET.replace("2 1 0 0", "2 1 x 0"))
    with pytest.raises(MeshFormatError, match="line 7"):
        read_msh(p)


def test_wrong_version(tmp_path):
    p = tmp_path / "v4.msh"
    p.write_text(ONE_TET.replace("2.2 0 8", "4.1 0 8"))
    with pytest.raises(MeshFormatError, match="version"):
        read_msh(p)


def test_vtk(tmp_path):
    m = build_square(9, [1, 1])
    p = tmp_path / "f.vtk"
    write_vtk(p, m, {"u": np.arange(9.0), "p": np.exp(1j * np.arange(9.0)), "c": np.ones(m.n_elements)})
    text = p.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert "DATASET UNSTRUCTURED_GRID" in text
    assert f"CELL_TYPES {m.n_elements}" in text
    assert "POINT_DATA 9" in text and f"CELL_DATA {m.n_elements}" in text
    for name in ("u", "p_re", "p_im", "c"):
        assert f"SCALARS {name} double 1" in text
    i = text.index("CELL_TYPES 8")
    assert set(text[i + 1:i + 9]) == {"5"}
    with pytest.raises(ValueError):
        write_vtk(p, m, {"bad": np.ones(5)})
