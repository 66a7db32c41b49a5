import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galerkin.kernels import (SingularEvaluationError, analytic_triangle_integrals, evaluate, green_kernel,
                              scene_epsilon, triangle_integrals)
from oracles import triangle_inverse_distance

UNIT_TRI = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)


def test_inverse_distance_value():
    G = green_kernel("[1/r]")
    assert evaluate(G, [[0, 0, 0]], [[2, 0, 0]])[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_helmholtz_k0_is_laplace():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(7, 3)), rng.normal(size=(5, 3)) + 5
    a = evaluate(green_kernel("[exp(ikr)/r]", 0.0), X, Y)
    b = evaluate(green_kernel("[1/r]"), X, Y)
    assert np.array_equal(a, b)


def test_helmholtz_value():
    G = green_kernel("[exp(ikr)/r]", 3.0)
    r = 1.7
    v = evaluate(G, [[0, 0, 0]], [[0, r, 0]])[0, 0]
    assert v == pytest.approx(np.exp(3j * r) / r, rel=1e-14)


def test_name_parsing():
    assert green_kernel("grady[1/r]2").component == 2
    assert green_kernel("grady[exp(ikr)/r]", 2.0).n_components == 3
    assert green_kernel("[1/r]", 5.0).k == 0.0
    for bad in ["[1/r^2]", "[1/r]1", "grady[1/r]4", "gradx[1/r]"]:
        with pytest.raises(ValueError):
            green_kernel(bad)
    with pytest.raises(ValueError):
        green_kernel("[exp(ikr)/r]", -1.0)


def _fd_grad(k, x, y, h):
    G = green_kernel("[exp(ikr)/r]", k)
    g = np.zeros(3, complex)
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        g[c] = (evaluate(G, [x], [y + e])[0, 0] - evaluate(G, [x], [y - e])[0, 0]) / (2 * h)
    return g


def test_gradient_axis_example():
    v = evaluate(green_kernel("grady[1/r]"), [[0, 0, 0]], [[0, 0, 1]])[:, 0, 0]
    assert np.allclose(v, [0, 0, -1], atol=1e-15)
    fd = _fd_grad(0.0, np.zeros(3), np.array([0, 0, 1.0]), 1e-5)
    assert np.allclose(v, fd, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 0.5, 4.0]))
def test_gradient_matches_finite_differences(seed, k):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=3), rng.normal(size=3)
    r = np.linalg.norm(x - y)
    if r < 0.05:
        return
    name = "grady[exp(ikr)/r]" if k else "grady[1/r]"
    g = evaluate(green_kernel(name, k), [x], [y])[:, 0, 0]
    fd = _fd_grad(k, x, y, 1e-5 * r)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["[1/r]", "[exp(ikr)/r]"]))
def test_reciprocity(seed, name):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    G = green_kernel(name, 2.5)
    assert np.abs(evaluate(G, X, Y) - evaluate(G, Y, X).T).max() <= 1e-14 * np.abs(evaluate(G, X, Y)).max()


def test_singular_pair_raises():
    X = np.array([[0, 0, 0], [1, 1, 1.0]])
    with pytest.raises(SingularEvaluationError, match=r"X\[1\] and Y\[0\]"):
        evaluate(green_kernel("[1/r]"), X, [[1, 1, 1.0]])
    assert scene_epsilon(X, X) == pytest.approx(1e-12 * math.sqrt(3))


def test_triangle_integral_at_centroid():
    x = UNIT_TRI.mean(axis=0)
    val, grad = analytic_triangle_integrals(UNIT_TRI, x)
    assert val == pytest.approx(triangle_inverse_distance(x, UNIT_TRI), rel=1e-8)
    # by symmetry the in-plane gradient is nearly balanced; the normal part is the principal value 0
    assert grad[2] == 0.0


def test_triangle_integral_far():
    x = np.array([30.0, 60.0, 73.0])
    x *= 100 / np.linalg.norm(x)
    val, _ = analytic_triangle_integrals(UNIT_TRI, x)
    assert val == pytest.approx(0.5 / np.linalg.norm(x - UNIT_TRI.mean(axis=0)), rel=1e-4)


def test_triangle_gradient_symmetry_axis():
    s = math.sqrt(3)
    tri = np.array([[1, 0, 0], [-0.5, s / 2, 0], [-0.5, -s / 2, 0]])
    for h in [0.0, 0.3, -2.0]:
        _, g = analytic_triangle_integrals(tri, [0, 0, h])
        assert np.abs(g[:2]).max() <= 1e-12


def test_degenerate_triangle():
    with pytest.raises(ValueError, match="degenerate"):
        analytic_triangle_integrals([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [0, 0, 1])


def _random_cases(n, seed=7):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        tri = rng.normal(size=(3, 3))
        if i % 4 == 0:
            # inside the triangle
            b = rng.dirichlet(np.ones(3))
            x = b @ tri
        elif i % 4 == 1:
            # just above an interior point
            nrm = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            x = rng.dirichlet(np.ones(3)) @ tri + 0.05 * nrm / np.linalg.norm(nrm)
        else:
            x = rng.normal(size=3) * 1.5
        cases.append((tri, x))
    return cases


def test_triangle_integrals_vs_adaptive_oracle():
    cases = _random_cases(100)
    tri = np.array([c[0] for c in cases])
    X = np.array([c[1] for c in cases])
    got = triangle_integrals(tri, X, np.arange(len(cases)))[:, 0]
    worst = 0.0
    for (t, x), g in zip(cases, got):
        ref = triangle_inverse_distance(x, t)
        worst = max(worst, abs(g - ref) / abs(ref))
    assert worst <= 1e-8


def test_triangle_integrals_on_vertex_and_edge():
    for x in [UNIT_TRI[1], 0.5 * (UNIT_TRI[1] + UNIT_TRI[2]), [0.3, 0.0, 0.0]]:
        val, _ = analytic_triangle_integrals(UNIT_TRI, x)
        assert np.isfinite(val)
        assert val == pytest.approx(triangle_inverse_distance(np.asarray(x, float), UNIT_TRI), rel=1e-8)


def test_triangle_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        tri = rng.normal(size=(3, 3))
        x = rng.normal(size=3) * 2
        _, g = analytic_triangle_integrals(tri, x)
        # int grad_y 1/|x-y| = -grad_x int 1/|x-y|
        h = 1e-5
        fd = np.array([(analytic_triangle_integrals(tri, x + h * e)[0] - analytic_triangle_integrals(tri, x - h * e)[0])
                       / (2 * h) for e in np.eye(3)])
        assert np.allclose(g, -fd, rtol=1e-5, atol=1e-7)
