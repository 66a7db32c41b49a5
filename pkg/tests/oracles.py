"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle is a direct (slow) route to a
quantity the package computes another way.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special


def simplex_monomial(exponents, volume):
    """Integral of prod(lambda_i ** a_i) over a simplex of given measure.

    Closed form a_0! ... a_d! d! / (sum a + d)! times the measure.
    """
    d = len(exponents) - 1
    num = math.prod(math.factorial(a) for a in exponents) * math.factorial(d)
    return volume * num / math.factorial(sum(exponents) + d)


def reference_triangle_monomial(a, b):
    """Integral of x^a y^b over the triangle (0,0),(1,0),(0,1)."""
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


def naive_bem(xq, wx, yq, wy, Phi, Psi, green):
    """Double loop over quadrature points: sum_k sum_l phi_i(x_k) w_k G(x_k,y_l) w_l psi_j(y_l).

    ``Phi`` and ``Psi`` are dense (M, N) basis evaluations.  Coincident
    points contribute 0.
    """
    Mx, My = len(xq), len(yq)
    G = np.zeros((Mx, My), dtype=complex)
    for k in range(Mx):
        for l in range(My):
            r = math.dist(xq[k], yq[l])
            if r > 0:
                G[k, l] = green(xq[k], yq[l])
    return Phi.T @ (wx[:, None] * G * wy[None, :]) @ Psi


def triangle_inverse_distance(x, tri, weight=lambda y: 1.0, rel=1e-12):
    """Integral over a triangle of weight(y)/|x-y| in polar coordinates.

    The triangle is split at the projection of x; each subtriangle is
    integrated in polar coordinates around that foot point, where the 1/R
    singularity is removed analytically by the Jacobian rho.
    """
    tri = np.asarray(tri, float)
    x = np.asarray(x, float)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    n /= np.linalg.norm(n)
    h = float(np.dot(x - tri[0], n))
    p = x - h * n
    total = 0.0
    for i in range(3):
        a, b = tri[(i + 1) % 3], tri[(i + 2) % 3]
        # signed subtriangle (p, a, b)
        ea, eb = a - p, b - p
        sgn = np.sign(np.dot(np.cross(ea, eb), n))
        if sgn == 0:
            continue
        ra, rb = np.linalg.norm(ea), np.linalg.norm(eb)
        if ra == 0 or rb == 0:
            continue
        u = ea / ra
        v = np.cross(n, u)
        th_b = math.atan2(np.dot(eb, v), np.dot(eb, u))
        # line through a, b in polar form: rho(theta) = dist / cos(theta - theta_n)
        ab = b - a
        foot = a - np.dot(a - p, ab) / np.dot(ab, ab) * ab
        dist = np.linalg.norm(foot - p)
        th_n = math.atan2(np.dot(foot - p, v), np.dot(foot - p, u))

        def inner(theta):
            rmax = dist / math.cos(theta - th_n)
            dirv = math.cos(theta) * u + math.sin(theta) * v

            def f(rho):
                y = p + rho * dirv
                return weight(y) * rho / math.sqrt(rho * rho + h * h)

            return integrate.quad(f, 0.0, rmax, epsabs=0, epsrel=rel, limit=200)[0]

        lo, hi = (0.0, th_b) if th_b > 0 else (th_b, 0.0)
        val = integrate.quad(inner, lo, hi, epsabs=0, epsrel=rel, limit=200)[0]
        total += sgn * val
    return total


def self_term_closed_form(tri):
    """Double integral of 1/|x-y| over a flat triangle with itself.

    Closed form (4 A^2 / 3) sum_i (1/l_i) log((l_i + l_j + l_k)/(l_j + l_k - l_i))
    with the sum over the three edges.
    """
    tri = np.asarray(tri, float)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    l = [np.linalg.norm(tri[(i + 2) % 3] - tri[(i + 1) % 3]) for i in range(3)]
    per = sum(l)
    return 4 * area**2 / 3 * sum(math.log(per / (per - 2 * li)) / li for li in l)


def acoustic_mie_farfield(k, a, theta, nmax=None):
    """Far-field pattern of a sound-soft sphere hit by exp(ikz).

    p_sca ~ F(theta) exp(ikr)/r with F = (i/k) sum (2n+1) (j_n(ka)/h_n(ka)) P_n(cos theta)
    and theta measured from the propagation direction.
    """
    if nmax is None:
        nmax = int(k * a + 4 * (k * a) ** (1 / 3) + 12)
    n = np.arange(nmax + 1)
    jn = special.spherical_jn(n, k * a)
    hn = jn + 1j * special.spherical_yn(n, k * a)
    c = (2 * n + 1) * jn / hn
    P = np.array([special.eval_legendre(n, ct) for ct in np.cos(np.atleast_1d(theta))])
    return (1j / k) * (P @ c)


def acoustic_mie_total(k, a, r, theta, nmax=None):
    """Total field exp(ikz) + p_sca for the sound-soft sphere (exterior point r >= a)."""
    if nmax is None:
        # j_n(ka)/h_n(ka) decays super-exponentially once n exceeds ka
        nmax = int(k * a + 4 * (k * a) ** (1 / 3) + 20)
    n = np.arange(nmax + 1)
    ja = special.spherical_jn(n, k * a)
    ha = ja + 1j * special.spherical_yn(n, k * a)
    hr = special.spherical_jn(n, k * r) + 1j * special.spherical_yn(n, k * r)
    P = special.eval_legendre(n, np.cos(theta))
    sca = -np.sum((2 * n + 1) * 1j**n * ja / ha * hr * P)
    return np.exp(1j * k * r * np.cos(theta)) + sca


def pec_mie_rcs(k, a, theta, phi, nmax=None):
    """Bistatic RCS of a PEC sphere, x-polarised plane wave along +z (sphere frame).

    sigma = (4 pi / k^2) [cos^2 phi |S2|^2 + sin^2 phi |S1|^2] using
    Riccati-Bessel coefficients a_n = psi_n'/xi_n', b_n = psi_n/xi_n.
    Backscatter is theta = pi.
    """
    x = k * a
    if nmax is None:
        nmax = int(x + 4 * x ** (1 / 3) + 10)
    n = np.arange(1, nmax + 1)
    jn = special.spherical_jn(n, x)
    yn = special.spherical_yn(n, x)
    djn = special.spherical_jn(n, x, derivative=True)
    dyn = special.spherical_yn(n, x, derivative=True)
    psi = x * jn
    dpsi = jn + x * djn
    xi = x * (jn + 1j * yn)
    dxi = (jn + 1j * yn) + x * (djn + 1j * dyn)
    an = dpsi / dxi
    bn = psi / xi
    theta = np.atleast_1d(theta)
    out = np.empty(len(theta))
    for t, th in enumerate(theta):
        mu = math.cos(th)
        pi_n = np.zeros(nmax + 1)
        tau_n = np.zeros(nmax + 1)
        pi_n[1] = 1.0
        tau_n[1] = mu
        if nmax >= 2:
            pi_n[2] = 3 * mu
            tau_n[2] = 2 * mu * pi_n[2] - 3 * pi_n[1]
        for m in range(3, nmax + 1):
            pi_n[m] = (2 * m - 1) / (m - 1) * mu * pi_n[m - 1] - m / (m - 1) * pi_n[m - 2]
            tau_n[m] = m * mu * pi_n[m] - (m + 1) * pi_n[m - 1]
        c = (2 * n + 1) / (n * (n + 1))
        S1 = np.sum(c * (an * pi_n[1:] + bn * tau_n[1:]))
        S2 = np.sum(c * (an * tau_n[1:] + bn * pi_n[1:]))
        out[t] = 4 * math.pi / k**2 * (math.cos(phi) ** 2 * abs(S2) ** 2 + math.sin(phi) ** 2 * abs(S1) ** 2)
    return out
