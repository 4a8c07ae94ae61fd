"""Brute-force element integrals used as oracles in the tests.

Integration uses a Gauss-Jacobi collapsed rule built from scipy, and the
basis functions are written out directly, so nothing here goes through
the package's own quadrature or basis tables.
"""
import numpy as np
from scipy.special import roots_jacobi, roots_legendre


def triangle_rule(p, degree=10):
    """Points ``(nq, 2)`` and weights for triangle ``p`` (``(3, 2)``), exact to ``degree``."""
    n = degree // 2 + 1
    # u direction carries the (1 - u) Jacobian: Gauss-Jacobi with alpha = 1
    xu, wu = roots_jacobi(n, 1.0, 0.0)
    xv, wv = roots_legendre(n)
    u = 0.5 * (xu + 1.0)
    wu = wu / 4.0
    v = 0.5 * (xv + 1.0)
    wv = wv / 2.0
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    s, t = U.ravel(), (V * (1.0 - U)).ravel()
    p = np.asarray(p, dtype=float)
    pts = p[0] + np.outer(s, p[1] - p[0]) + np.outer(t, p[2] - p[0])
    e1, e2 = p[1] - p[0], p[2] - p[0]
    jac = abs(e1[0] * e2[1] - e1[1] * e2[0])
    return pts, W.ravel() * jac


def barycentric(p, x):
    """Barycentric coordinates ``(nq, 3)`` and their gradients ``(3, 2)``."""
    p = np.asarray(p, dtype=float)
    T = np.array([[p[0, 0], p[1, 0], p[2, 0]], [p[0, 1], p[1, 1], p[2, 1]], [1.0, 1.0, 1.0]])
    Tinv = np.linalg.inv(T)
    lam = (Tinv @ np.vstack([x.T, np.ones(len(x))])).T
    return lam, Tinv[:, :2]


def p1_basis(p, x):
    lam, g = barycentric(p, x)
    return lam, np.broadcast_to(g, (len(x), 3, 2))


def mini_basis(p, x):
    """Scalar MINI basis: three hats and ``27 l1 l2 l3``."""
    lam, g = barycentric(p, x)
    l1, l2, l3 = lam.T
    phi = np.column_stack([lam, 27.0 * l1 * l2 * l3])
    gb = 27.0 * (np.outer(l2 * l3, g[0]) + np.outer(l1 * l3, g[1]) + np.outer(l1 * l2, g[2]))
    grads = np.concatenate([np.broadcast_to(g, (len(x), 3, 2)), gb[:, None, :]], axis=1)
    return phi, grads


def mass(basis, p):
    x, w = triangle_rule(p)
    phi, _ = basis(p, x)
    return np.einsum("q,qi,qj->ij", w, phi, phi)


def stiffness(basis, p):
    x, w = triangle_rule(p)
    _, g = basis(p, x)
    return np.einsum("q,qid,qjd->ij", w, g, g)


def load(basis, p, f):
    x, w = triangle_rule(p)
    phi, _ = basis(p, x)
    return np.einsum("q,q,qi->i", w, f(x[:, 0], x[:, 1]), phi)


def vector_basis(basis, p, x):
    """Component-blocked vector basis: values ``(nq, 2n, 2)``, gradients ``(nq, 2n, 2, 2)``."""
    phi, g = basis(p, x)
    nq, n = phi.shape
    val = np.zeros((nq, 2 * n, 2))
    grad = np.zeros((nq, 2 * n, 2, 2))
    for c in range(2):
        val[:, c * n : (c + 1) * n, c] = phi
        grad[:, c * n : (c + 1) * n, c, :] = g
    return val, grad


def divdiv_rotrot(basis, p):
    x, w = triangle_rule(p)
    _, g = vector_basis(basis, p, x)
    div = g[:, :, 0, 0] + g[:, :, 1, 1]
    rot = g[:, :, 1, 0] - g[:, :, 0, 1]
    return np.einsum("q,qi,qj->ij", w, div, div) + np.einsum("q,qi,qj->ij", w, rot, rot)


def transport(basis, p, u_basis, u_loc):
    """``T[i, j] = integral of (u . grad phi_j) phi_i`` for ``u`` given by local coefficients ``(2, n_u)``."""
    x, w = triangle_rule(p)
    phi, g = basis(p, x)
    psi, _ = u_basis(p, x)
    u = psi @ np.asarray(u_loc).T  # (nq, 2)
    adv = np.einsum("qd,qjd->qj", u, g)
    return np.einsum("q,qi,qj->ij", w, phi, adv)


def chemo(basis, p, s_loc):
    """``C[i, j] = integral of phi_j (s . grad phi_i)`` with ``s`` P1."""
    return transport(basis, p, p1_basis, s_loc).T


def pressure(p):
    """``D[i, j] = integral of psi_j div Phi_i`` (MINI velocity rows, P1 pressure columns)."""
    x, w = triangle_rule(p)
    _, g = vector_basis(mini_basis, p, x)
    div = g[:, :, 0, 0] + g[:, :, 1, 1]
    psi, _ = p1_basis(p, x)
    return np.einsum("q,qi,qj->ij", w, div, psi)


def random_triangle(rng):
    """A counter-clockwise triangle with minimum angle bounded away from 0."""
    while True:
        p = rng.uniform(-2.0, 2.0, size=(3, 2))
        e1, e2 = p[1] - p[0], p[2] - p[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if det < 0:
            p = p[[0, 2, 1]]
            det = -det
        edges = [np.linalg.norm(p[i] - p[j]) for i, j in ((0, 1), (1, 2), (2, 0))]
        if det > 0.05 * max(edges) ** 2:
            return p
