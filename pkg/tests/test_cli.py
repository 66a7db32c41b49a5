import csv
import math
import subprocess
import sys

import numpy as np
import pytest

from galerkin import demos
from galerkin.cli import build_parser, main


def _bessel_i(nu, x, terms=40):
    return sum((x / 2) ** (2 * m + nu) / (math.factorial(m) * math.factorial(m + nu)) for m in range(terms))


def _report(path):
    rows = list(csv.reader(open(path)))
    return {r[0]: r[1] for r in rows[1:] if len(r) == 2}


def test_parser_defaults_and_validation(capsys):
    p = build_parser()
    a = p.parse_args(["cfie-sphere", "--out", "x"])
    assert a.beta == 0.5 and a.n == 642
    a = p.parse_args(["hmatrix-bench", "--out", "x", "--n", "2562,10242"])
    assert a.n == [2562, 10242] and a.fixed_freq == 316.0 and not a.scaled_freq
    for bad in (["cfie-sphere", "--out", "x", "--beta", "1.5"],
                ["cfie-sphere", "--out", "x", "--beta", "-0.1"],
                ["helmholtz-sphere", "--out", "x", "--tol", "0"],
                ["helmholtz-sphere", "--out", "x", "--k", "1", "--freq", "3"],
                ["laplace-neumann"]):
        with pytest.raises(SystemExit) as exc:
            p.parse_args(bad)
        assert exc.value.code == 2
    assert "beta must lie in [0, 1]" in capsys.readouterr().err


def test_laplace_neumann_run_and_overwrite(tmp_path, capsys):
    out = tmp_path / "new" / "dir"
    assert main(["laplace-neumann", "--n", "1000", "--out", str(out)]) == 0
    for name in ("laplace-neumann.vtk", "report.csv", "report.txt"):
        assert (out / name).exists()
    rep = _report(out / "report.csv")
    assert rep["subcommand"] == "laplace-neumann" and rep["converged"] == "1"
    assert float(rep["result.integral_u"]) == pytest.approx(math.pi / 4, rel=1e-2)
    before = (out / "report.csv").read_bytes()
    assert main(["laplace-neumann", "--n", "300", "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert (out / "report.csv").read_bytes() == before
    assert main(["laplace-neumann", "--n", "300", "--out", str(out), "--force"]) == 0
    assert (out / "report.csv").read_bytes() != before


def test_out_is_a_file(tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    assert main(["laplace-neumann", "--n", "100", "--out", str(f)]) == 2


def test_laplace_neumann_self_convergence():
    u0 = [demos.laplace_neumann(n)[0].summary["u_origin"] for n in (50, 500, 5000)]
    d1, d2 = abs(u0[1] - u0[0]), abs(u0[2] - u0[1])
    assert d2 * 4 <= d1


def test_laplace_neumann_zero_source():
    rep, u = demos.laplace_neumann(300, f=lambda X: np.zeros(len(X)))
    assert rep.converged and np.all(u == 0)


def test_laplace_fourier_checks(tmp_path):
    exact = 1 / (_bessel_i(0, 1.0) + _bessel_i(1, 1.0))
    assert demos.fourier_exact_origin() == pytest.approx(exact, rel=1e-14)
    rep, _ = demos.laplace_fourier(1000)
    assert rep.summary["u_origin"] == pytest.approx(exact, rel=1e-2)
    assert rep.summary["ring_spread"] <= 0.02
    rep0, u = demos.laplace_fourier(300, g=0.0)
    assert np.all(u == 0)


def test_cube_exact_values():
    ex = demos.cube_exact_eigenvalues(10)
    assert np.round(ex[:5], 4).tolist() == [88.8264, 118.4353, 167.7833, 207.2617, 207.2617]
    assert round(ex[-1], 4) == 286.2185
    assert np.all(np.diff(ex) >= 0)


def test_eigencube_small(tmp_path):
    out = tmp_path / "eig"
    assert main(["eigencube", "--n", "1000", "--neig", "4", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "eigenvalues.csv")))
    assert rows[0] == ["index", "exact", "computed", "rel_error"]
    assert len(rows) == 5
    assert all(float(r[2]) > float(r[1]) for r in rows[1:])  # conforming P1 overestimates


def test_gram_matrix_spd():
    from galerkin.assembly import integral
    from galerkin.femspace import make_fem
    from galerkin.mesh import build_sphere
    from galerkin.quadrature import make_domain

    mesh = build_sphere(162)
    V = make_fem(mesh, "RWG")
    Id = integral(make_domain(mesh, 3), V, V).toarray()
    assert np.allclose(Id, Id.T, atol=1e-15)
    np.linalg.cholesky(Id)


def test_cfie_beta_validation():
    with pytest.raises(ValueError):
        demos.cfie_sphere(42, beta=1.2)


def test_helmholtz_dense_cap(tmp_path, capsys, monkeypatch):
    import galerkin.assembly as asm

    monkeypatch.setattr(asm, "DEFAULT_MEMORY_CAP", 1e3)
    assert main(["helmholtz-sphere", "--n", "162", "--k", "1", "--out", str(tmp_path)]) == 2
    assert "compressed" in capsys.readouterr().err


def test_helmholtz_small_run(tmp_path):
    assert main(["helmholtz-sphere", "--n", "162", "--k", "1", "--tol", "1e-3", "--out", str(tmp_path)]) == 0
    rep = _report(tmp_path / "report.csv")
    assert float(rep["param.freq_hz"]) == pytest.approx(340 / (2 * math.pi))
    assert (tmp_path / "helmholtz-sphere.vtk").exists()
    assert (tmp_path / "rank_map.csv").read_text().startswith("row_lo,row_hi,col_lo,col_hi,kind,rank")


def test_auto_k():
    from galerkin.mesh import build_sphere, edge_stats

    m = build_sphere(162)
    assert demos.auto_wavenumber(m) == pytest.approx(1 / edge_stats(m).max_len)


def test_bench_csv(tmp_path):
    out = tmp_path / "b"
    assert main(["hmatrix-bench", "--n", "162,642", "--no-solve", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "bench.csv")))
    assert rows[0] == ["n_dof", "t_ass", "t_reg", "t_sol", "freq_hz"]
    assert [int(r[0]) for r in rows[1:]] == [162, 642]
    assert all(float(r[4]) == 316 for r in rows[1:])


def test_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["laplace-fourier", "--n", "500", "--out", str(a)])
    main(["laplace-fourier", "--n", "500", "--out", str(b)])
    assert (a / "laplace-fourier.vtk").read_bytes() == (b / "laplace-fourier.vtk").read_bytes()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "galerkin", "laplace-neumann", "--n", "200", "--out", str(tmp_path),
                        "--threads", "1"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "laplace-neumann: converged" in r.stdout
