"""Worked examples behind the command line: FEM Laplace problems, the cube
eigenvalues, acoustic and electromagnetic scattering by the unit sphere and
the H-matrix timing sweep.  Each returns a ``RunReport``."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hmatrix as hm
from .assembly import integral, regularize, regularize_radiation
from .femspace import div, dirichlet, eval_matrix, grad, interpolate, make_fem, nx
from .fileio import write_vtk
from .kernels import green_kernel
from .linsolve import cg
from .mesh import Mesh, boundary, build_cube, build_disk, build_sphere, build_square, edge_stats, swap
from .quadrature import make_domain

logger = logging.getLogger(__name__)

SOUND_SPEED = 340.0
BENCH_HEADER = ["n_dof", "t_ass", "t_reg", "t_sol", "freq_hz"]


@dataclass
class RunReport:
    """Parameters, sizes, timings and result summaries of one run."""

    subcommand: str
    parameters: dict = field(default_factory=dict)
    dofs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    table: list = field(default_factory=list)
    table_header: list = field(default_factory=list)
    converged: bool = True
    solution: object = field(default=None, repr=False)

    def rows(self):
        yield "subcommand", self.subcommand
        yield "converged", int(bool(self.converged))
        for prefix, d in (("param", self.parameters), ("dofs", self.dofs),
                          ("time", self.timings), ("result", self.summary)):
            for k, v in d.items():
                yield f"{prefix}.{k}", v

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            for k, v in self.rows():
                w.writerow([k, _fmt(v)])
            if self.table:
                w.writerow([])
                w.writerow(self.table_header)
                w.writerows([[_fmt(x) for x in row] for row in self.table])

    def text(self) -> str:
        lines = [f"{self.subcommand}: {'converged' if self.converged else 'NOT converged'}"]
        for title, d in (("parameters", self.parameters), ("dofs", self.dofs),
                         ("timings [s]", self.timings), ("results", self.summary)):
            if d:
                lines.append(f"{title}:")
                lines.extend(f"  {k:<24} {_fmt(v)}" for k, v in d.items())
        if self.table:
            widths = [max(len(str(h)), 12) for h in self.table_header]
            lines.append("  ".join(str(h).rjust(w) for h, w in zip(self.table_header, widths)))
            for row in self.table:
                lines.append("  ".join(_fmt(x).rjust(w) for x, w in zip(row, widths)))
        return "\n".join(lines) + "\n"

    def write_text(self, path) -> None:
        Path(path).write_text(self.text())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    if isinstance(v, (complex, np.complexfloating)):
        return f"{v.real:.10g}{v.imag:+.10g}j"
    return str(v)


class _Timer:
    def __init__(self, store, key):
        self.store, self.key = store, key

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.store[self.key] = self.store.get(self.key, 0.0) + time.perf_counter() - self.t


def _vtk(out, name, mesh, fields):
    if out is not None:
        write_vtk(Path(out) / name, mesh, fields)


# FEM demos ---------------------------------------------------------------------


def laplace_neumann(n: int = 1000, f=None, out=None, tol: float = 1e-10) -> tuple[RunReport, np.ndarray]:
    """-Δu + u = f on the unit disk with homogeneous Neumann data, P1."""
    f = (lambda X: X[:, 0] ** 2) if f is None else f
    rep = RunReport("laplace-neumann", {"n": n, "rule": 3})
    with _Timer(rep.timings, "t_ass"):
        mesh = build_disk(n, 1.0)
        omega = make_domain(mesh, 3)
        V = make_fem(mesh, "P1")
        K = integral(omega, grad(V), grad(V)) + integral(omega, V, V)
        F = integral(omega, V, f)
    with _Timer(rep.timings, "t_sol"):
        res = cg(K, F, tol=tol, maxit=10 * V.n_dofs)
    u = res.x.real
    rep.converged = bool(res.converged)
    rep.dofs["n_dof"] = V.n_dofs
    rep.summary.update(iterations=res.iterations, residual=res.residual_history[-1],
                       integral_u=float(integral(omega, V, lambda X: np.ones(len(X))) @ u),
                       u_origin=float(interpolate(V, u, [[0.0, 0.0, 0.0]])[0]))
    _vtk(out, "laplace-neumann.vtk", mesh, {"u": u})
    return rep, u


def fourier_exact_origin() -> float:
    """u(0) = 1/(I0(1) + I1(1)) for -Δu + u = 0, ∂u/∂n + u = 1 on the unit disk."""
    from scipy.special import iv

    return 1.0 / (iv(0, 1.0) + iv(1, 1.0))


def laplace_fourier(n: int = 4000, g: float = 1.0, out=None, tol: float = 1e-10) -> tuple[RunReport, np.ndarray]:
    """-Δu + u = 0 on the unit disk with ∂u/∂n + u = g, P2."""
    rep = RunReport("laplace-fourier", {"n": n, "g": g, "rule": 7, "boundary_rule": 3})
    with _Timer(rep.timings, "t_ass"):
        mesh = build_disk(n, 1.0)
        sigma = boundary(mesh)
        omega = make_domain(mesh, 7)
        dsig = make_domain(sigma, 3)
        V = make_fem(mesh, "P2")
        K = integral(omega, grad(V), grad(V)) + integral(omega, V, V) + integral(dsig, V, V)
        F = integral(dsig, V, lambda X: np.full(len(X), float(g)))
    with _Timer(rep.timings, "t_sol"):
        res = cg(K, F, tol=tol, maxit=10 * V.n_dofs)
    u = res.x.real
    rep.converged = bool(res.converged)
    rep.dofs["n_dof"] = V.n_dofs
    u0 = float(interpolate(V, u, [[0.0, 0.0, 0.0]])[0])
    ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    ring = interpolate(V, u, np.stack([0.5 * np.cos(ang), 0.5 * np.sin(ang), 0 * ang], axis=1))
    exact = fourier_exact_origin() * g
    rep.summary.update(iterations=res.iterations, residual=res.residual_history[-1], u_origin=u0,
                       u_origin_exact=exact, rel_error_origin=abs(u0 - exact) / abs(exact) if g else abs(u0),
                       ring_spread=float((ring.max() - ring.min()) / max(abs(ring).max(), 1e-300)))
    if out is not None:
        _vtk(out, "laplace-fourier.vtk", mesh, {"u": interpolate(V, u, mesh.vertices)})
    return rep, u


def cube_exact_eigenvalues(n_eig: int) -> np.ndarray:
    """Smallest Dirichlet eigenvalues π²(l² + 4m² + 4n²) of [0,1]x[0,1/2]x[0,1/2]."""
    r = int(math.isqrt(4 * n_eig)) + 4
    vals = sorted(math.pi ** 2 * (l * l + 4 * m * m + 4 * q * q)
                  for l, m, q in itertools.product(range(1, r + 1), repeat=3))
    return np.array(vals[:n_eig])


def eigencube(n: int = 10000, n_eig: int = 10, out=None) -> tuple[RunReport, np.ndarray]:
    """Smallest Dirichlet eigenvalues of the Laplacian on the 1 x 1/2 x 1/2 box, P1."""
    from .linsolve import eig_smallest_generalized

    rep = RunReport("eigencube", {"n": n, "neig": n_eig, "rule": 4})
    with _Timer(rep.timings, "t_ass"):
        mesh = build_cube(n, [1.0, 0.5, 0.5])
        omega = make_domain(mesh, 4)
        V = dirichlet(make_fem(mesh, "P1"), boundary(mesh))
        K = integral(omega, grad(V), grad(V))
        M = integral(omega, V, V)
    with _Timer(rep.timings, "t_sol"):
        vals, vecs = eig_smallest_generalized(K, M, n_eig)
    exact = cube_exact_eigenvalues(n_eig)
    rel = np.abs(vals - exact) / exact
    rep.dofs.update(n_vertices=mesh.n_vertices, n_dof=V.n_dofs)
    rep.table_header = ["index", "exact", "computed", "rel_error"]
    rep.table = [[i + 1, exact[i], vals[i], rel[i]] for i in range(n_eig)]
    rep.summary.update(max_rel_error=float(rel.max()))
    if out is not None:
        full = np.zeros((V.n_dofs_full, n_eig))
        full[V.free_dofs] = vecs
        _vtk(out, "eigencube.vtk", mesh, {f"mode{i + 1}": full[:, i] for i in range(min(n_eig, 4))})
    return rep, vals


# acoustic scattering ---------------------------------------------------------------


def plane_wave(k: float, direction=(0.0, 0.0, -1.0)):
    d = np.asarray(direction, dtype=float)
    return lambda X: np.exp(1j * k * (np.asarray(X) @ d))


def _refined_solve(apply, factor_solve, b, tol, steps=3):
    """Direct solve followed by a few steps of iterative refinement."""
    x = factor_solve(b)
    bn = np.linalg.norm(b)
    res = np.linalg.norm(b - apply(x)) / bn
    for _ in range(steps):
        if res <= tol:
            break
        x = x + factor_solve(b - apply(x))
        res = np.linalg.norm(b - apply(x)) / bn
    return x, res


@dataclass
class AcousticSolution:
    mesh: Mesh
    space: object
    domain: object
    k: float
    density: np.ndarray  # solution of S lambda = P_inc; p_sca = -S lambda / 4π
    direction: np.ndarray

    def far_field(self, xhat: np.ndarray) -> np.ndarray:
        """F with p_sca ~ F exp(ikr)/r, for unit directions xhat (M, 3)."""
        qs = self.domain.quadrature()
        B = eval_matrix(self.space, self.domain)[0]
        dens = qs.weights * (B @ self.density)
        return -(np.exp(-1j * self.k * (xhat @ qs.points.T)) @ dens) / (4 * np.pi)

    def total_field(self, points, tol=None) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        G = green_kernel("[exp(ikr)/r]", self.k)
        S = integral(points, self.domain, G, self.space, tol) if tol else integral(points, self.domain, G, self.space)
        R = regularize_radiation(points, self.domain, "[1/r]", self.space)
        p_sca = -(S @ self.density + R @ self.density) / (4 * np.pi)
        return plane_wave(self.k, self.direction)(points) + p_sca


def auto_wavenumber(mesh: Mesh) -> float:
    return 1.0 / edge_stats(mesh).max_len


def helmholtz_sphere(n: int = 2562, k: float | None = None, freq: float | None = None, tol: float | None = 1e-3,
                     out=None, observe: bool = True, solve: bool = True, memory_cap=None):
    """Sound-soft unit sphere, single-layer formulation, P1.

    The wavenumber is ``k``, else 2π freq / 340, else 1 / (longest edge).
    With ``tol`` the operators are H-matrices and the system is solved by
    H-LU; without it everything is dense.
    """
    mesh = build_sphere(n, 1.0)
    if k is None:
        k = 2 * np.pi * freq / SOUND_SPEED if freq is not None else auto_wavenumber(mesh)
    rep = RunReport("helmholtz-sphere", {"n": n, "k": k, "freq_hz": k * SOUND_SPEED / (2 * np.pi),
                                         "tol": tol if tol else "dense"})
    d = np.array([0.0, 0.0, -1.0])
    S2 = make_domain(mesh, 3)
    V = make_fem(mesh, "P1")
    G = green_kernel("[exp(ikr)/r]", k)
    rep.dofs["n_dof"] = V.n_dofs
    with _Timer(rep.timings, "t_ass"):
        if tol:
            A = integral(S2, S2, V, G, V, tol) * (1 / (4 * np.pi))
        else:
            from .assembly import bem_dense

            A = bem_dense(S2, S2, V, G, V, memory_cap=memory_cap) / (4 * np.pi)
    with _Timer(rep.timings, "t_reg"):
        R = regularize(S2, S2, V, "[1/r]", V) / (4 * np.pi)
    if not solve:
        rep.timings["t_sol"] = float("nan")
        return rep, None
    rhs = integral(S2, V, plane_wave(k, d))
    with _Timer(rep.timings, "t_sol"):
        if tol:
            LHS = hm.add_sparse(A, R)
            LU = LHS.lu()
            lam, res = _refined_solve(LHS.matvec, lambda b: hm.solve(LU, b), rhs, tol)
        else:
            LHS = A + R.toarray()
            import scipy.linalg as sla

            fac = sla.lu_factor(LHS)
            lam, res = _refined_solve(lambda x: LHS @ x, lambda b: sla.lu_solve(fac, b), rhs, 1e-10)
    rep.converged = bool(res <= max(10 * (tol or 1e-10), 1e-10))
    sol = AcousticSolution(mesh, V, S2, k, lam, d)
    rep.summary["residual"] = res
    if tol:
        rep.summary["compression"] = LHS.stored_entries() / V.n_dofs ** 2
    ang = np.deg2rad(np.arange(0, 360, 45))
    ex = np.array([1.0, 0.0, 0.0])
    xh = np.cos(ang)[:, None] * d + np.sin(ang)[:, None] * ex
    for a, v in zip(np.arange(0, 360, 45), sol.far_field(xh)):
        rep.summary[f"far_field_{a:03d}"] = complex(v)
    if observe:
        square = swap(build_square(5 * n, [5.0, 5.0]))
        # the square is placed in the x-z plane, which contains the incidence axis
        square = Mesh(square.vertices[:, [0, 2, 1]], square.elements)
        with _Timer(rep.timings, "t_rad"):
            p = sol.total_field(square.vertices, tol)
        rep.summary["max_abs_p_tot"] = float(np.abs(p).max())
        _vtk(out, "helmholtz-sphere.vtk", square, {"abs_p_tot": np.abs(p), "p_tot": p})
        if out is not None:
            _vtk(out, "helmholtz-sphere-density.vtk", mesh, {"lambda": lam})
            if tol:
                A.write_rank_map(Path(out) / "rank_map.csv")
    rep.solution = sol
    return rep, sol


# electromagnetic scattering -------------------------------------------------------


@dataclass
class EMSolution:
    mesh: Mesh
    space: object
    domain: object
    k: float
    current: np.ndarray

    def far_field(self, xhat: np.ndarray) -> np.ndarray:
        """E_inf(xhat) with E_sca ~ E_inf exp(ikr)/r, shape (M, 3)."""
        qs = self.domain.quadrature()
        E = eval_matrix(self.space, self.domain)
        J = np.stack([c @ self.current for c in E], axis=1) * qs.weights[:, None]
        A = np.exp(-1j * self.k * (xhat @ qs.points.T)) @ J
        return (1j * self.k / (4 * np.pi)) * (A - xhat * np.sum(xhat * A, axis=1, keepdims=True))

    def rcs(self, xhat: np.ndarray) -> np.ndarray:
        """Bistatic radar cross section 4π |E_inf|² for a unit incident field."""
        return 4 * np.pi * np.sum(np.abs(self.far_field(xhat)) ** 2, axis=1)


def cfie_sphere(n: int = 642, k: float | None = None, freq: float | None = None, beta: float = 0.5,
                tol: float | None = None, out=None):
    """PEC unit sphere with the combined field equation on RWG elements.

    beta = 1 is the electric and beta = 0 the magnetic field equation.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    mesh = build_sphere(n, 1.0)
    if k is None:
        k = 2 * np.pi * freq / SOUND_SPEED if freq is not None else 1.0
    rep = RunReport("cfie-sphere", {"n": n, "k": k, "beta": beta, "tol": tol if tol else "dense"})
    sigma = make_domain(mesh, 3)
    V = make_fem(mesh, "RWG")
    rep.dofs["n_dof"] = V.n_dofs
    X0 = np.array([0.0, 0.0, -1.0])
    Ep = np.array([0.0, 1.0, 0.0])
    Hp = np.cross(X0, Ep)
    pw = plane_wave(k, X0)
    PWE = [lambda X, c=c: pw(X) * Ep[c] for c in range(3)]
    PWH = [lambda X, c=c: pw(X) * Hp[c] for c in range(3)]
    G = green_kernel("[exp(ikr)/r]", k)
    H = green_kernel("grady[exp(ikr)/r]", k)
    c1, c2 = 1j * k / (4 * np.pi), -1j / (4 * np.pi * k)
    with _Timer(rep.timings, "t_ass"):
        Id = integral(sigma, V, V)
        args = (tol,) if tol else ()
        T1 = integral(sigma, sigma, V, G, V, *args)
        T2 = integral(sigma, sigma, div(V), G, div(V), *args)
        K = integral(sigma, sigma, nx(V), H, V, *args)
    with _Timer(rep.timings, "t_reg"):
        R1 = regularize(sigma, sigma, V, "[1/r]", V)
        R2 = regularize(sigma, sigma, div(V), "[1/r]", div(V))
        RK = regularize(sigma, sigma, nx(V), "grady[1/r]", V)
    sparse_part = (-beta * (c1 * R1 + c2 * R2) + (1 - beta) * (0.5 * Id - RK / (4 * np.pi))).tocsr()
    rhs = beta * integral(sigma, V, PWE) - (1 - beta) * integral(sigma, nx(V), PWH)
    with _Timer(rep.timings, "t_sol"):
        if tol:
            LHS = hm.add(hm.scale(T1, -beta * c1), hm.scale(T2, -beta * c2))
            LHS = hm.add(LHS, hm.scale(K, -(1 - beta) / (4 * np.pi)))
            LHS = hm.add_sparse(LHS, sparse_part)
            LU = LHS.lu()
            J, res = _refined_solve(LHS.matvec, lambda b: hm.solve(LU, b), rhs, tol)
        else:
            LHS = -beta * (c1 * T1 + c2 * T2) - (1 - beta) / (4 * np.pi) * K + sparse_part.toarray()
            import scipy.linalg as sla

            fac = sla.lu_factor(LHS)
            J, res = _refined_solve(lambda x: LHS @ x, lambda b: sla.lu_solve(fac, b), rhs, 1e-10)
    rep.converged = bool(res <= max(10 * (tol or 1e-10), 1e-10))
    sol = EMSolution(mesh, V, sigma, k, J)
    rep.summary["residual"] = res
    th = np.deg2rad(np.arange(0, 181, 30))
    xh = np.cos(th)[:, None] * X0 + np.sin(th)[:, None] * Ep
    for a, v in zip(np.arange(0, 181, 30), sol.rcs(xh)):
        rep.summary[f"rcs_eplane_{a:03d}"] = float(v)
    if out is not None:
        E = eval_matrix(V, make_domain(mesh, 1))
        Jc = np.stack([c @ J for c in E], axis=1)
        _vtk(out, "cfie-sphere.vtk", mesh, {"abs_J": np.linalg.norm(np.abs(Jc), axis=1)})
    rep.solution = sol
    return rep, sol


# benchmark ---------------------------------------------------------------------------


def hmatrix_bench(ns, tol: float = 1e-3, fixed_freq: float | None = 316.0, solve: bool = True,
                  out=None) -> RunReport:
    """Timings of the H-matrix Helmholtz sphere over mesh sizes.

    With ``fixed_freq`` (Hz) every size uses that frequency, otherwise the
    wavenumber follows the mesh (1 / longest edge).
    """
    rep = RunReport("hmatrix-bench", {"n": " ".join(str(n) for n in ns), "tol": tol,
                                      "mode": f"fixed {fixed_freq} Hz" if fixed_freq else "scaled"})
    rep.table_header = list(BENCH_HEADER)
    for n in ns:
        r, _ = helmholtz_sphere(n, freq=fixed_freq, tol=tol, observe=False, solve=solve)
        rep.table.append([r.dofs["n_dof"], r.timings["t_ass"], r.timings["t_reg"], r.timings["t_sol"],
                          r.parameters["freq_hz"]])
        rep.converged &= r.converged
        logger.info("bench n=%d: %s", n, r.timings)
    if len(rep.table) >= 2:
        nd = np.log([row[0] for row in rep.table])
        ta = np.log([row[1] for row in rep.table])
        rep.summary["t_ass_exponent"] = float(np.polyfit(nd, ta, 1)[0])
    if out is not None:
        with open(Path(out) / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_HEADER)
            w.writerows([[_fmt(x) for x in row] for row in rep.table])
    return rep
