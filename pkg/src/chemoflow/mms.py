"""Manufactured solution on the unit square, error norms and observed orders.

The exact fields decay like ``exp(-t)``; the velocity vanishes on the
boundary and is divergence free, the scalars have zero normal derivative
and the flux ``s = grad c`` has zero normal trace. Residual forcings are
written out by hand for the system with every coefficient equal to one
and no gravitational potential. The momentum residual uses the pressure
sign of the discrete scheme, i.e. ``u_t + (u.grad)u - lap u + grad pi``,
so the discrete pressure approximates ``pi`` itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fespace import FeSpace
from .quadrature import triangle_quadrature

K = 2.0 * np.pi


_TRIG_CACHE = {}


def _key(a):
    info = a.__array_interface__
    return (info["data"][0], a.shape, info["strides"])


def _trig(x, y):
    # read-only inputs (cached quadrature points) are evaluated once
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.flags.writeable or y.flags.writeable:
        return np.sin(K * x), np.cos(K * x), np.sin(K * y), np.cos(K * y)
    key = (_key(x), _key(y))
    hit = _TRIG_CACHE.get(key)
    if hit is None:
        if len(_TRIG_CACHE) > 16:
            _TRIG_CACHE.clear()
        vals = (np.sin(K * x), np.cos(K * x), np.sin(K * y), np.cos(K * y))
        hit = _TRIG_CACHE[key] = (x, y, vals)  # keep x, y alive so the key stays valid
    return hit[2]


class ManufacturedSolution:
    """Closed-form fields, first derivatives and residual forcings.

    Every method takes ``(t, x, y)`` with ``x``, ``y`` broadcastable arrays.
    Vector-valued results are returned as tuples of components; gradients
    of vector fields as ``((d1/dx, d1/dy), (d2/dx, d2/dy))``.
    """

    # -- fields ---------------------------------------------------------

    def n(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return np.exp(-t) * (cx + cy + 3.0)

    def w(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return np.exp(-t) * (cy - cx + 6.0)

    def c(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return np.exp(-t) * (sy + cx - K * y + 9.0)

    def s(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        return -K * E * sx, K * E * (cy - 1.0)

    def u(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        return E * sy * (cx - 1.0), E * sx * (1.0 - cy)

    def pi(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return np.exp(-t) * (sy + cx)

    def fields(self, t, x, y):
        """``(n, w, c, s, u, pi)`` at the given points."""
        return (self.n(t, x, y), self.w(t, x, y), self.c(t, x, y),
                self.s(t, x, y), self.u(t, x, y), self.pi(t, x, y))

    # -- derivatives ----------------------------------------------------

    def grad_n(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        return -K * E * sx, -K * E * sy

    def grad_w(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        return K * E * sx, -K * E * sy

    def grad_c(self, t, x, y):
        return self.s(t, x, y)

    def grad_s(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        z = np.zeros_like(E * sx)
        return (-K * K * E * cx, z), (z, -K * K * E * sy)

    def div_s(self, t, x, y):
        return self.lap_c(t, x, y)

    def rot_s(self, t, x, y):
        return np.zeros_like(self.n(t, x, y))

    def grad_u(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        u1 = (-K * E * sy * sx, K * E * cy * (cx - 1.0))
        u2 = (K * E * cx * (1.0 - cy), K * E * sx * sy)
        return u1, u2

    def div_u(self, t, x, y):
        (a, _), (_, d) = self.grad_u(t, x, y)
        return a + d

    def grad_pi(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        return -K * E * sx, K * E * cy

    def lap_n(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return -K * K * np.exp(-t) * (cx + cy)

    def lap_w(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return K * K * np.exp(-t) * (cx - cy)

    def lap_c(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        return -K * K * np.exp(-t) * (cx + sy)

    def lap_u(self, t, x, y):
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        return -K * K * E * sy * (2.0 * cx - 1.0), -K * K * E * sx * (1.0 - 2.0 * cy)

    # -- forcings -------------------------------------------------------

    def forcing_n(self, t, x, y):
        n, w = self.n(t, x, y), self.w(t, x, y)
        (nx, ny), (sx_, sy_), (u1, u2) = self.grad_n(t, x, y), self.s(t, x, y), self.u(t, x, y)
        chemo = nx * sx_ + ny * sy_ + n * self.lap_c(t, x, y)
        return -n + u1 * nx + u2 * ny - self.lap_n(t, x, y) + chemo - n * (1.0 - n - w)

    def forcing_w(self, t, x, y):
        n, w = self.n(t, x, y), self.w(t, x, y)
        (wx, wy), (sx_, sy_), (u1, u2) = self.grad_w(t, x, y), self.s(t, x, y), self.u(t, x, y)
        chemo = wx * sx_ + wy * sy_ + w * self.lap_c(t, x, y)
        return -w + u1 * wx + u2 * wy - self.lap_w(t, x, y) + chemo - w * (1.0 - n - w)

    def forcing_c(self, t, x, y):
        n, w, c = self.n(t, x, y), self.w(t, x, y), self.c(t, x, y)
        (cx_, cy_), (u1, u2) = self.s(t, x, y), self.u(t, x, y)
        return -c + u1 * cx_ + u2 * cy_ - self.lap_c(t, x, y) + (n + w) * c

    def forcing_s(self, t, x, y):
        """Gradient of ``forcing_c``."""
        sx, cx, sy, cy = _trig(x, y)
        E = np.exp(-t)
        n, w, c = self.n(t, x, y), self.w(t, x, y), self.c(t, x, y)
        g1, g2 = self.s(t, x, y)
        u1, u2 = self.u(t, x, y)
        (a11, a12), (a21, a22) = self.grad_u(t, x, y)
        (h11, h12), (h21, h22) = self.grad_s(t, x, y)
        # grad(u . grad c) = (grad u)^T grad c + (hess c) u
        adv1 = a11 * g1 + a21 * g2 + h11 * u1 + h21 * u2
        adv2 = a12 * g1 + a22 * g2 + h12 * u1 + h22 * u2
        glap1, glap2 = K**3 * E * sx, -K**3 * E * cy
        nw = n + w
        dnw1, dnw2 = 0.0, -2.0 * K * E * sy
        f1 = -g1 + adv1 - glap1 + dnw1 * c + nw * g1
        f2 = -g2 + adv2 - glap2 + dnw2 * c + nw * g2
        return f1, f2

    def forcing_u(self, t, x, y):
        u1, u2 = self.u(t, x, y)
        (a11, a12), (a21, a22) = self.grad_u(t, x, y)
        l1, l2 = self.lap_u(t, x, y)
        p1, p2 = self.grad_pi(t, x, y)
        return (-u1 + u1 * a11 + u2 * a12 - l1 + p1,
                -u2 + u1 * a21 + u2 * a22 - l2 + p2)

    def forcings(self, t, x, y):
        """``(F_n, F_w, F_c, F_s, F_u)``."""
        return (self.forcing_n(t, x, y), self.forcing_w(t, x, y), self.forcing_c(t, x, y),
                self.forcing_s(t, x, y), self.forcing_u(t, x, y))


TEST2 = ManufacturedSolution()


def exact_fields(t, p):
    """Exact ``(n, w, c, s, u, pi)`` at point ``p = (x, y)``."""
    x, y = p
    return TEST2.fields(t, x, y)


def forcing_at(t, p):
    """Residual forcings ``(F_n, F_w, F_c, F_s, F_u)`` at ``p``."""
    x, y = p
    return TEST2.forcings(t, x, y)


# -- error norms ------------------------------------------------------


ERROR_DEGREE = 5


def spatial_errors(space: FeSpace, coeffs, exact, grad_exact, component=None, degree=ERROR_DEGREE):
    """L2 error and H1-seminorm error of a discrete field.

    ``exact(x, y)`` and ``grad_exact(x, y)`` give the exact values and
    gradient (tuples of components for vector fields). With ``component``
    set, only that component of a vector field is compared and
    ``exact``/``grad_exact`` describe the scalar component.
    """
    rule = triangle_quadrature(degree)
    tab = space.tables(rule)
    x, y = tab.points[..., 0], tab.points[..., 1]
    dx = tab.dx
    vh = space.values_at(coeffs, rule)
    gh = space.gradients_at(coeffs, rule)
    if component is not None:
        vh, gh = vh[..., component], gh[..., component, :]
    ve = np.asarray(exact(x, y), dtype=float)
    ge = grad_exact(x, y)
    if vh.ndim == 2:
        ev = (vh - ve) ** 2
        eg = (gh[..., 0] - ge[0]) ** 2 + (gh[..., 1] - ge[1]) ** 2
    else:
        ev = sum((vh[..., c] - ve[c]) ** 2 for c in range(2))
        eg = sum((gh[..., c, d] - ge[c][d]) ** 2 for c in range(2) for d in range(2))
    return float(np.sqrt(np.sum(dx * ev))), float(np.sqrt(np.sum(dx * eg)))


def accumulate_norms(errors, dt):
    """Fold per-step ``(L2, H1-semi)`` pairs into ``(l_inf(L2), l2(H1), l_inf(H1))``.

    The H1 quantities use the full norm ``sqrt(L2^2 + semi^2)``.
    """
    e = np.asarray(list(errors), dtype=float).reshape(-1, 2)
    if len(e) == 0:
        raise ValueError("no time steps to accumulate")
    h1sq = e[:, 0] ** 2 + e[:, 1] ** 2
    return float(e[:, 0].max()), float(np.sqrt(dt * h1sq.sum())), float(np.sqrt(h1sq.max()))


class UndefinedOrderError(ValueError):
    """An order was requested from a zero or non-finite error."""


def convergence_orders(errors, resolutions):
    """``log(e_i / e_{i+1}) / log(h_i / h_{i+1})`` for consecutive rows."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(resolutions, dtype=float)
    if e.shape != h.shape or e.ndim != 1 or len(e) < 2:
        raise ValueError("need matching error/resolution lists of length >= 2")
    if np.any(np.diff(h) >= 0) or np.any(h <= 0):
        raise ValueError("resolutions must be positive and strictly decreasing")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise UndefinedOrderError("orders need positive finite errors")
    return list(np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:]))


# -- accumulation over a run ------------------------------------------


SCALAR_VARS = ("n", "w", "c")
ERROR_VARS = ("n", "w", "c", "u1", "u2")


@dataclass
class ErrorAccumulator:
    """Collects per-step spatial errors of one run against the exact solution."""

    solution: ManufacturedSolution = field(default_factory=ManufacturedSolution)
    steps: dict = field(default_factory=lambda: {v: [] for v in ERROR_VARS})

    def record(self, spaces, state):
        """Add the errors of ``state`` at its time ``state.t``."""
        ms, t = self.solution, state.t
        for name in SCALAR_VARS:
            f = getattr(ms, name)
            g = getattr(ms, "grad_" + name)
            self.steps[name].append(spatial_errors(
                spaces.scalar, getattr(state, name),
                lambda x, y, f=f: f(t, x, y), lambda x, y, g=g: g(t, x, y)))
        for comp, name in enumerate(("u1", "u2")):
            self.steps[name].append(spatial_errors(
                spaces.velocity, state.u,
                lambda x, y, c=comp: ms.u(t, x, y)[c],
                lambda x, y, c=comp: ms.grad_u(t, x, y)[c],
                component=comp))

    def norms(self, dt):
        """``{var: {"linf_l2": ..., "l2_h1": ..., "linf_h1": ...}}``."""
        out = {}
        for name, errs in self.steps.items():
            a, b, c = accumulate_norms(errs, dt)
            out[name] = {"linf_l2": a, "l2_h1": b, "linf_h1": c}
        return out
