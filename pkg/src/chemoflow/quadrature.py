"""Quadrature rules on the reference triangle (0,0), (1,0), (0,1)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Barycentric points ``(nq, 3)`` and weights summing to 1/2."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


def _orbit3(a, b):
    # the three permutations of (a, b, b)
    return [(a, b, b), (b, a, b), (b, b, a)]


def _orbit6(a, b, c):
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


def _tabulated(degree):
    if degree == 1:
        pts, wts = [(1 / 3, 1 / 3, 1 / 3)], [1.0]
    elif degree == 2:
        pts, wts = _orbit3(2 / 3, 1 / 6), [1 / 3] * 3
    elif degree == 3:
        # Strang-Fix six-point rule
        pts = _orbit6(0.659027622374092, 0.231933368553031, 0.109039009072877)
        wts = [1 / 6] * 6
    elif degree == 5:
        # Dunavant seven-point rule
        a1, b1 = 0.059715871789770, 0.470142064105115
        a2, b2 = 0.797426985353087, 0.101286507323456
        pts = [(1 / 3, 1 / 3, 1 / 3)] + _orbit3(a1, b1) + _orbit3(a2, b2)
        wts = [0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3
    else:
        return None
    pts = np.array(pts, dtype=float)
    pts /= pts.sum(axis=1, keepdims=True)
    wts = np.array(wts, dtype=float)
    return pts, 0.5 * wts / wts.sum()


def _collapsed_gauss(degree):
    # Gauss-Legendre on the unit square mapped by (u, v) -> (u, v (1 - u));
    # the Jacobian (1 - u) adds one degree in u.
    n = (degree + 3) // 2  # exact in u up to degree + 1
    xg, wg = np.polynomial.legendre.leggauss(n)
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    U, V = np.meshgrid(xg, xg, indexing="ij")
    WU, WV = np.meshgrid(wg, wg, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel()
    return np.column_stack([1.0 - x - y, x, y]), w


@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree ``degree``.

    Degrees 1, 2, 3 and 5 use compact tabulated rules; any other positive
    degree falls back to a collapsed Gauss product rule.
    """
    if int(degree) != degree or degree < 1 or degree > 30:
        raise ValueError(f"unsupported quadrature degree {degree!r}")
    degree = int(degree)
    tab = _tabulated(degree)
    pts, wts = tab if tab is not None else _collapsed_gauss(degree)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, degree)
