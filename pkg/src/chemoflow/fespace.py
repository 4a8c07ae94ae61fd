"""Discrete function spaces used by the solver.

Four kinds are supported:

* ``SCALAR_P1``: continuous piecewise linears (species and chemical).
* ``VECTOR_P1_NT``: P1 vector fields whose normal component vanishes on
  the boundary of the (axis-aligned) domain.
* ``MINI``: P1 vectors enriched with one cubic bubble per component and
  element, zero on the boundary.
* ``PRESSURE_P1``: P1 pressure; the zero-mean condition is imposed through
  a multiplier in the saddle-point system (see ``mean_weights``).

Vector DOFs are blocked by component: all component-0 DOFs, then all
component-1 DOFs. Within a component, vertex DOFs come first and bubble
DOFs (MINI only) follow in element order.
"""
from __future__ import annotations

import enum

import numpy as np

from .mesh import BOTTOM, LEFT, RIGHT, TOP, Mesh
from .quadrature import QuadratureRule, triangle_quadrature

BUBBLE_SCALE = 27.0


class SpaceKind(enum.Enum):
    SCALAR_P1 = "ScalarP1"
    VECTOR_P1_NT = "VectorP1NormalTrace"
    MINI = "MiniVelocity"
    PRESSURE_P1 = "PressureP1MeanZero"


class FeSpace:
    """DOF layout, constraint set and basis tables for one space kind."""

    def __init__(self, mesh: Mesh, kind: SpaceKind):
        self.mesh = mesh
        self.kind = SpaceKind(kind)
        nv, ne = mesh.n_vertices, mesh.n_triangles
        self.ncomp = 2 if self.kind in (SpaceKind.VECTOR_P1_NT, SpaceKind.MINI) else 1
        self.has_bubble = self.kind is SpaceKind.MINI
        self.nloc = 4 if self.has_bubble else 3
        self.scalar_ndofs = nv + ne if self.has_bubble else nv
        self.dof_count = self.ncomp * self.scalar_ndofs

        local = mesh.triangles
        if self.has_bubble:
            local = np.column_stack([local, nv + np.arange(ne)])
        self.scalar_cell_dofs = local
        self.cell_dofs = np.hstack([local + c * self.scalar_ndofs for c in range(self.ncomp)])
        self.cell_dofs.setflags(write=False)

        fixed = self._constrained_dofs()
        self.fixed_dofs = fixed
        self.fixed_values = np.zeros(len(fixed))
        self._mean_weights = None

    def _constrained_dofs(self):
        mesh = self.mesh
        vs = mesh.vertex_sides
        n = self.scalar_ndofs
        if self.kind is SpaceKind.VECTOR_P1_NT:
            # normal of a vertical side is e_x, of a horizontal side e_y
            x_fixed = np.flatnonzero(vs[:, LEFT] | vs[:, RIGHT])
            y_fixed = np.flatnonzero(vs[:, BOTTOM] | vs[:, TOP])
            return np.concatenate([x_fixed, y_fixed + n])
        if self.kind is SpaceKind.MINI:
            b = mesh.boundary_vertices
            return np.concatenate([b, b + n])
        return np.zeros(0, dtype=np.int64)

    @property
    def constraints(self) -> dict:
        return {int(d): float(v) for d, v in zip(self.fixed_dofs, self.fixed_values)}

    @property
    def mean_weights(self) -> np.ndarray:
        """``m[j] = integral of psi_j`` (pressure mean functional)."""
        if self._mean_weights is None:
            m = np.zeros(self.scalar_ndofs)
            np.add.at(m, self.mesh.triangles, np.repeat(self.mesh.areas[:, None] / 3.0, 3, axis=1))
            self._mean_weights = m
        return self._mean_weights

    def __repr__(self):
        return f"FeSpace({self.kind.value}, dofs={self.dof_count})"

    # -- basis tables -------------------------------------------------

    def basis_values(self, bary) -> np.ndarray:
        """Scalar shape functions at barycentric points, shape ``(nq, nloc)``."""
        lam = np.atleast_2d(np.asarray(bary, dtype=float))
        if not self.has_bubble:
            return lam.copy()
        bub = BUBBLE_SCALE * lam[:, 0] * lam[:, 1] * lam[:, 2]
        return np.column_stack([lam, bub])

    def lambda_derivatives(self, bary) -> np.ndarray:
        """``d phi_j / d lambda_l`` at barycentric points, shape ``(nq, nloc, 3)``.

        ``grad phi_j = sum_l (d phi_j / d lambda_l) grad lambda_l`` on each element.
        """
        lam = np.atleast_2d(np.asarray(bary, dtype=float))
        out = np.zeros((len(lam), self.nloc, 3))
        out[:, :3, :] = np.eye(3)
        if self.has_bubble:
            out[:, 3, :] = BUBBLE_SCALE * np.column_stack(
                [lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
        return out

    def basis_gradients(self, bary, cells=None) -> np.ndarray:
        """Scalar shape gradients, shape ``(ne, nq, nloc, 2)``."""
        lam = np.atleast_2d(np.asarray(bary, dtype=float))
        g = self.mesh.grads if cells is None else self.mesh.grads[cells]
        ne, nq = len(g), len(lam)
        out = np.empty((ne, nq, self.nloc, 2))
        out[:, :, :3, :] = g[:, None, :, :]
        if self.has_bubble:
            prods = np.column_stack([lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
            out[:, :, 3, :] = BUBBLE_SCALE * np.einsum("qi,eid->eqd", prods, g)
        return out

    def local_coeffs(self, coeffs) -> np.ndarray:
        """Coefficients gathered per element, shape ``(ne, ncomp, nloc)``."""
        coeffs = self._check(coeffs)
        ne = self.mesh.n_triangles
        return coeffs[self.cell_dofs].reshape(ne, self.ncomp, self.nloc)

    def _check(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.dof_count,):
            raise ValueError(f"expected {self.dof_count} coefficients, got shape {coeffs.shape}")
        return coeffs

    def tables(self, rule: QuadratureRule) -> "BasisTables":
        """Basis values, gradients and weights at ``rule``, cached per degree."""
        cache = self.__dict__.setdefault("_tables", {})
        key = (rule.degree, len(rule))
        if key not in cache:
            cache[key] = BasisTables(self, rule)
        return cache[key]

    # -- evaluation ---------------------------------------------------

    def values_at(self, coeffs, rule: QuadratureRule) -> np.ndarray:
        """Field values at quadrature points: ``(ne, nq)`` or ``(ne, nq, 2)``."""
        coeffs = self._check(coeffs)
        tab = self.tables(rule)
        ne, nq = self.mesh.n_triangles, len(rule)
        vals = coeffs[self.cell_dofs].reshape(ne * self.ncomp, self.nloc) @ tab.phi.T
        if self.ncomp == 1:
            return vals
        return vals.reshape(ne, self.ncomp, nq).transpose(0, 2, 1)

    def gradients_at(self, coeffs, rule: QuadratureRule) -> np.ndarray:
        """Field gradients at quadrature points: ``(ne, nq, 2)`` or ``(ne, nq, 2, 2)``.

        For vector fields entry ``[..., c, d]`` is the derivative of
        component ``c`` along direction ``d``.
        """
        coeffs = self._check(coeffs)
        tab = self.tables(rule)
        ne, nq, nc = self.mesh.n_triangles, len(rule), self.ncomp
        loc = coeffs[self.cell_dofs].reshape(ne * nc, self.nloc)
        dl = loc @ tab.dlam.reshape(self.nloc, nq * 3)  # d/d lambda_l at each point
        g = np.matmul(dl.reshape(ne, nc * nq, 3), self.mesh.grads)  # (ne, nc*nq, 2)
        g = g.reshape(ne, nc, nq, 2)
        return g[:, 0] if nc == 1 else g.transpose(0, 2, 1, 3)

    def interpolate(self, f, t=None) -> np.ndarray:
        """Nodal interpolant of ``f(x, y)`` (or ``f(t, x, y)`` when ``t`` given).

        ``f`` returns a scalar array or, for vector spaces, a pair of arrays.
        Bubble coefficients match the value at each element centroid.
        Constrained DOFs are set to their prescribed values.
        """
        call = (lambda x, y: f(x, y)) if t is None else (lambda x, y: f(t, x, y))
        mesh = self.mesh
        vx, vy = mesh.vertices[:, 0], mesh.vertices[:, 1]
        comps = _as_components(call(vx, vy), self.ncomp, len(vx))
        out = np.zeros(self.dof_count)
        n = self.scalar_ndofs
        for c in range(self.ncomp):
            out[c * n : c * n + mesh.n_vertices] = comps[c]
        if self.has_bubble:
            cen = mesh.vertices[mesh.triangles].mean(axis=1)
            cvals = _as_components(call(cen[:, 0], cen[:, 1]), 2, len(cen))
            for c in range(2):
                nodal = comps[c][mesh.triangles].mean(axis=1)
                out[c * n + mesh.n_vertices : (c + 1) * n] = cvals[c] - nodal
        out[self.fixed_dofs] = self.fixed_values
        return out


class BasisTables:
    """Scalar shape data of one space at one quadrature rule (read-only)."""

    def __init__(self, space: FeSpace, rule: QuadratureRule):
        mesh = space.mesh
        self.rule = rule
        self.phi = space.basis_values(rule.points)  # (nq, nloc)
        self.grads = space.basis_gradients(rule.points)  # (ne, nq, nloc, 2)
        self.dlam = space.lambda_derivatives(rule.points).transpose(1, 0, 2).copy()  # (nloc, nq, 3)
        self.dx = 2.0 * mesh.areas[:, None] * rule.weights[None, :]  # (ne, nq)
        nq, nl = self.phi.shape
        self.phiphi = (self.phi[:, :, None] * self.phi[:, None, :]).reshape(nq, nl * nl)
        self.points = np.einsum("qi,eid->eqd", rule.points, mesh.vertices[mesh.triangles])
        for a in (self.phi, self.grads, self.dlam, self.dx, self.phiphi, self.points):
            a.setflags(write=False)


def _as_components(val, ncomp, npts):
    if ncomp == 1:
        return [np.broadcast_to(np.asarray(val, dtype=float), (npts,))]
    return [np.broadcast_to(np.asarray(v, dtype=float), (npts,)) for v in val]


def build_space(mesh: Mesh, kind) -> FeSpace:
    return FeSpace(mesh, kind)


def _check_point(space, t, bary):
    if not 0 <= t < space.mesh.n_triangles:
        raise IndexError(f"triangle index {t} out of range")
    lam = np.asarray(bary, dtype=float).reshape(3)
    return lam


def eval_function(space: FeSpace, coeffs, t: int, bary):
    """Value of the discrete field at barycentric point ``bary`` of triangle ``t``."""
    coeffs = space._check(coeffs)
    lam = _check_point(space, t, bary)
    phi = space.basis_values(lam)[0]
    loc = coeffs[space.cell_dofs[t]].reshape(space.ncomp, space.nloc)
    val = loc @ phi
    return float(val[0]) if space.ncomp == 1 else val


def eval_gradient(space: FeSpace, coeffs, t: int, bary):
    """Gradient (vector) or Jacobian (``[component, direction]``) at a point."""
    coeffs = space._check(coeffs)
    lam = _check_point(space, t, bary)
    g = space.basis_gradients(lam, cells=[t])[0, 0]  # (nloc, 2)
    loc = coeffs[space.cell_dofs[t]].reshape(space.ncomp, space.nloc)
    jac = loc @ g
    return jac[0] if space.ncomp == 1 else jac


__all__ = [
    "FeSpace",
    "SpaceKind",
    "build_space",
    "eval_function",
    "eval_gradient",
    "triangle_quadrature",
]
