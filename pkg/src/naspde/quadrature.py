"""Quadrature helpers shared across the package.

Adaptive Simpson for 1D integrals with an absolute tolerance, plus
Gauss-Legendre node/weight utilities on intervals and triangles.
"""

import numpy as np
from numpy.polynomial.legendre import leggauss


class QuadratureError(RuntimeError):
    """Raised when an adaptive rule fails to reach its tolerance."""


def adaptive_simpson(f, a, b, tol=1e-12, max_depth=60):
    """Integrate f on [a, b] with adaptive Simpson to absolute tolerance.

    f must accept a scalar. Raises QuadratureError if the recursion depth
    is exhausted before the tolerance is met.
    """
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)


def _simpson_rec(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    if abs(err) <= 15.0 * tol:
        return left + right + err / 15.0
    if depth <= 0:
        raise QuadratureError(
            f"adaptive Simpson did not converge on [{a}, {b}] (residual {abs(err):.3e})"
        )
    return _simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + _simpson_rec(
        f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1
    )


def gauss_legendre(n, a=0.0, b=1.0):
    """Gauss-Legendre nodes and weights mapped to the interval [a, b]."""
    x, w = leggauss(n)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    return mid + half * x, half * w


def triangle_rule(order=4):
    """Quadrature nodes/weights on the reference triangle (0,0),(1,0),(0,1).

    Built by collapsing an order x order tensor Gauss-Legendre rule on the
    unit square (Duffy transform); exact for polynomials of degree up to
    roughly 2*order - 2 on the triangle, far beyond what P1 assembly needs.
    Returns (points (m, 2), weights (m,)) with weights summing to 1/2.
    """
    x, wx = leggauss(order)
    x = 0.5 * (x + 1.0)
    wx = 0.5 * wx
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(wx, wx, indexing="ij")
    # Duffy map (u, v) -> (u, v*(1-u)) with Jacobian (1-u)
    px = u.ravel()
    py = (v * (1.0 - u)).ravel()
    w = (wu * wv * (1.0 - u)).ravel()
    return np.column_stack([px, py]), w
