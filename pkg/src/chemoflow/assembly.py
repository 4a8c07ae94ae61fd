"""Vectorized assembly of the matrices and vectors of the time-stepping scheme.

All element integrals are evaluated with a quadrature rule over every
element at once; element matrices are scattered into a CSR structure that
is computed once per pair of spaces and cached on the test space.
Accumulation uses ``np.bincount`` in fixed element order, so assembled
values do not depend on anything but the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import FeSpace, SpaceKind
from .quadrature import QuadratureRule, triangle_quadrature

DEFAULT_DEGREE = 5
# bubble x bubble (mass) is degree 6, the MINI convection integrand degree 8
BUBBLE_DEGREE = 8


class AssemblyError(ValueError):
    """Incompatible spaces or fields passed to an assembly routine."""


@dataclass(frozen=True, eq=False)
class FieldFunction:
    """A discrete field: a space together with its coefficient vector."""

    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.space.dof_count,):
            raise AssemblyError(
                f"field has {c.shape} coefficients, space needs {self.space.dof_count}"
            )
        object.__setattr__(self, "coeffs", c)

    def values_at(self, rule):
        return self.space.values_at(self.coeffs, rule)

    def gradients_at(self, rule):
        return self.space.gradients_at(self.coeffs, rule)


def default_degree(*spaces) -> int:
    return BUBBLE_DEGREE if any(s.has_bubble for s in spaces) else DEFAULT_DEGREE


def _rule(degree, *spaces) -> QuadratureRule:
    return triangle_quadrature(degree if degree is not None else default_degree(*spaces))


def _dx(space, rule):
    """Physical quadrature weights, shape ``(ne, nq)``."""
    return space.tables(rule).dx


def quadrature_points(mesh, rule) -> np.ndarray:
    """Physical coordinates of the quadrature points, ``(ne, nq, 2)``."""
    return np.einsum("qi,eid->eqd", rule.points, mesh.vertices[mesh.triangles])


def _gram(a, b, dx):
    """``out[e, i, j] = sum_q dx[e, q] a[e, q, i] b[e, q, j]``."""
    return np.matmul((a * dx[:, :, None]).transpose(0, 2, 1), b)


def _sym(local):
    # BLAS products are not bitwise symmetric
    return 0.5 * (local + local.transpose(0, 2, 1))


def _same_mesh(*spaces):
    m0 = spaces[0].mesh
    for s in spaces[1:]:
        if not m0.same_as(s.mesh):
            raise AssemblyError("spaces are defined on different meshes")


# -- sparse scatter ----------------------------------------------------


class ElementPattern:
    """CSR sparsity of ``rows x cols`` element blocks plus the scatter map.

    Negative entries in ``row_dofs``/``col_dofs`` mark local rows or
    columns that are dropped (eliminated DOFs). ``data`` sums element
    matrices into the CSR value array, so matrices sharing a pattern can
    be combined by adding value arrays.
    """

    def __init__(self, row_dofs, col_dofs, shape):
        ne, a = row_dofs.shape
        b = col_dofs.shape[1]
        r = np.repeat(row_dofs, b, axis=1).ravel()
        c = np.tile(col_dofs, (1, a)).ravel()
        keep = (r >= 0) & (c >= 0)
        self.keep = None if keep.all() else np.flatnonzero(keep)
        r, c = r[keep], c[keep]
        keys = r.astype(np.int64) * shape[1] + c
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.shape = shape
        self.map = inverse.ravel()
        self.nnz = len(uniq)
        self.indices = (uniq % shape[1]).astype(np.int32)
        self.indptr = np.zeros(shape[0] + 1, dtype=np.int32)
        np.cumsum(np.bincount(uniq // shape[1], minlength=shape[0]), out=self.indptr[1:])

    def data(self, local) -> np.ndarray:
        vals = np.asarray(local, dtype=float).ravel()
        if self.keep is not None:
            vals = vals[self.keep]
        return np.bincount(self.map, weights=vals, minlength=self.nnz)

    def matrix(self, data) -> sp.csr_matrix:
        A = sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)
        A.has_sorted_indices = True
        return A

    def assemble(self, local):
        return self.matrix(self.data(local))


def _pattern(test: FeSpace, trial: FeSpace) -> ElementPattern:
    cache = test.__dict__.setdefault("_patterns", {})
    key = id(trial)
    if key not in cache:
        shape = (test.dof_count, trial.dof_count)
        cache[key] = (trial, ElementPattern(test.cell_dofs, trial.cell_dofs, shape))
    return cache[key][1]


def pattern(space: FeSpace) -> ElementPattern:
    """Square pattern of ``space`` (shared by all its bilinear forms)."""
    return _pattern(space, space)


def block_diag_local(local, ncomp):
    """Repeat a scalar element matrix on the component diagonal."""
    if ncomp == 1:
        return local
    ne, a, b = local.shape
    out = np.zeros((ne, ncomp * a, ncomp * b))
    for c in range(ncomp):
        out[:, c * a : (c + 1) * a, c * b : (c + 1) * b] = local
    return out


def _scatter_vector(space, local):
    """Sum element vectors ``(ne, ncomp*nloc)`` into a global vector."""
    return np.bincount(space.cell_dofs.ravel(), weights=np.asarray(local).ravel(), minlength=space.dof_count)


def _positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")


# -- bilinear forms ----------------------------------------------------


def mass_local(space: FeSpace, weight=None, rule=None) -> np.ndarray:
    """Element matrices ``integral of weight * phi_j phi_i`` (scalar basis).

    ``weight`` is ``(ne, nq)`` at ``rule``; ``None`` means one.
    """
    rule = _rule(None, space) if rule is None else rule
    tab = space.tables(rule)
    wdx = tab.dx if weight is None else tab.dx * weight
    nl = space.nloc
    return (wdx @ tab.phiphi).reshape(-1, nl, nl)


def weighted_mass(space: FeSpace, weight, rule: QuadratureRule) -> sp.csr_matrix:
    """``M_ij = integral of weight * phi_j . phi_i``; ``weight`` is ``(ne, nq)``."""
    return pattern(space).assemble(block_diag_local(mass_local(space, weight, rule), space.ncomp))


def mass_matrix(space: FeSpace, degree=None) -> sp.csr_matrix:
    rule = _rule(degree, space)
    return pattern(space).assemble(block_diag_local(mass_local(space, None, rule), space.ncomp))


def stiffness_local(space: FeSpace, degree=None) -> np.ndarray:
    """Element matrices ``(grad phi_j, grad phi_i)`` (scalar basis)."""
    tab = space.tables(_rule(degree, space))
    g = tab.grads
    return _sym(_gram(g[..., 0], g[..., 0], tab.dx) + _gram(g[..., 1], g[..., 1], tab.dx))


def stiffness_matrix(space: FeSpace, D: float = 1.0, degree=None) -> sp.csr_matrix:
    """``D * (grad phi_j, grad phi_i)``, componentwise for vector spaces."""
    _positive(D, "diffusion coefficient")
    return pattern(space).assemble(block_diag_local(D * stiffness_local(space, degree), space.ncomp))


def _div_rot_tables(space, rule):
    """Divergence and scalar curl of each local vector basis function."""
    cache = space.__dict__.setdefault("_divrot", {})
    key = (rule.degree, len(rule))
    if key in cache:
        return cache[key]
    g = space.tables(rule).grads  # (ne, nq, nloc, 2)
    div = np.concatenate([g[..., 0], g[..., 1]], axis=2)
    rot = np.concatenate([-g[..., 1], g[..., 0]], axis=2)
    cache[key] = (div, rot)
    return div, rot


def divdiv_rotrot_matrix(space: FeSpace, Dc: float = 1.0, degree=None) -> sp.csr_matrix:
    """``Dc * [(div s, div t) + (rot s, rot t)]`` with ``rot s = d_x s_2 - d_y s_1``."""
    _positive(Dc, "Dc")
    if space.ncomp != 2:
        raise AssemblyError("div/rot form needs a vector space")
    rule = _rule(degree, space)
    div, rot = _div_rot_tables(space, rule)
    dx = _dx(space, rule)
    local = _gram(div, div, dx) + _gram(rot, rot, dx)
    return pattern(space).assemble(Dc * _sym(local))


def _velocity_values(u: FieldFunction, rule):
    if u.space.ncomp != 2:
        raise AssemblyError("transporting field must be a vector field")
    return u.values_at(rule)


def _transport_local_quad(space, u, rule):
    """Quadrature version of ``_transport_local``."""
    tab = space.tables(rule)
    g = tab.grads
    uq = _velocity_values(u, rule)
    adv = uq[..., 0:1] * g[..., 0] + uq[..., 1:2] * g[..., 1]
    return np.matmul(tab.phi.T, adv * tab.dx[:, :, None])


def _transport_tensor(space, field_space):
    """``R[k, l, j, i] = 2 * integral over the reference of psi_k (dphi_j/dlambda_l) phi_i``."""
    cache = space.__dict__.setdefault("_transport_tensors", {})
    key = field_space.kind
    if key not in cache:
        rule = triangle_quadrature(3 * max(space.nloc, field_space.nloc) - 1)
        psi = field_space.basis_values(rule.points)
        phi = space.basis_values(rule.points)
        dl = space.lambda_derivatives(rule.points)
        R = 2.0 * np.einsum("q,qk,qjl,qi->klji", rule.weights, psi, dl, phi)
        cache[key] = (R, R.reshape(field_space.nloc * 3, space.nloc * space.nloc))
    return cache[key][1]


def _transport_local(space, u, rule=None):
    """``T[e, i, j] = integral of (u . grad phi_j) phi_i`` (scalar basis).

    Without a rule the integral is exact: ``u`` and the basis are
    polynomials in the barycentric coordinates, so a reference tensor
    contracted with ``u_k . grad lambda_l`` gives every element at once.
    """
    _same_mesh(space, u.space)
    if u.space.ncomp != 2:
        raise AssemblyError("transporting field must be a vector field")
    if rule is not None:
        return _transport_local_quad(space, u, rule)
    mesh = space.mesh
    ne, nk = mesh.n_triangles, u.space.nloc
    loc = u.space.local_coeffs(u.coeffs)  # (ne, 2, nk)
    a = np.matmul(loc.transpose(0, 2, 1), mesh.grads.transpose(0, 2, 1))  # (ne, nk, 3)
    T = a.reshape(ne, nk * 3) @ _transport_tensor(space, u.space)
    T = T.reshape(ne, space.nloc, space.nloc).transpose(0, 2, 1)
    return T * mesh.areas[:, None, None]


def _rule_or_exact(degree):
    return None if degree is None else triangle_quadrature(degree)


def skew_transport_local(space: FeSpace, u: FieldFunction, degree=None) -> np.ndarray:
    """Element matrices of ``1/2 [(u . grad phi_j, phi_i) - (u . grad phi_i, phi_j)]``."""
    T = _transport_local(space, u, _rule_or_exact(degree))
    return 0.5 * (T - T.transpose(0, 2, 1))


def transport_matrix_A(space: FeSpace, u: FieldFunction, degree=None) -> sp.csr_matrix:
    """Skew-symmetric transport ``A_ij = A(u, phi_j, phi_i)``."""
    if space.ncomp != 1:
        raise AssemblyError("transport_matrix_A needs a scalar space")
    return pattern(space).assemble(skew_transport_local(space, u, degree))


def convection_matrix_B(space: FeSpace, u: FieldFunction, degree=None) -> sp.csr_matrix:
    """Skew-symmetric convection ``B_ij = B(u, Phi_j, Phi_i)`` on a vector space."""
    if space.ncomp != 2:
        raise AssemblyError("convection_matrix_B needs a vector space")
    return pattern(space).assemble(block_diag_local(skew_transport_local(space, u, degree), 2))


def truncated_weight_mass(space: FeSpace, g: FieldFunction, scale: float = 1.0, degree=None) -> sp.csr_matrix:
    """``scale * ([g]_+ phi_j, phi_i)``, truncation taken at quadrature points."""
    if g.space.ncomp != 1:
        raise AssemblyError("truncation weight must be a scalar field")
    _same_mesh(space, g.space)
    rule = _rule(degree, space, g.space)
    return weighted_mass(space, scale * np.maximum(g.values_at(rule), 0.0), rule)


def chemo_local(space: FeSpace, s_prev: FieldFunction, degree=None) -> np.ndarray:
    """Element matrices of ``(phi_j s_prev, grad phi_i)``."""
    if space.ncomp != 1 or s_prev.space.ncomp != 2:
        raise AssemblyError("chemo_matrix needs a scalar space and a vector flux")
    # the transport integral with s_prev in place of u, test and trial swapped
    return _transport_local(space, s_prev, _rule_or_exact(degree)).transpose(0, 2, 1)


def chemo_matrix(space: FeSpace, s_prev: FieldFunction, chi: float, degree=None) -> sp.csr_matrix:
    """``C_ij = chi * (phi_j s_prev, grad phi_i)``."""
    return pattern(space).assemble(chi * chemo_local(space, s_prev, degree))


def pressure_local(velocity: FeSpace, pressure: FeSpace, degree=None) -> np.ndarray:
    """Element blocks ``(psi_j, div Phi_i)``, shape ``(ne, 2*nloc_u, nloc_p)``."""
    if velocity.ncomp != 2 or pressure.ncomp != 1:
        raise AssemblyError("pressure_coupling needs (vector, scalar) spaces")
    _same_mesh(velocity, pressure)
    rule = _rule(degree, velocity, pressure)
    div, _ = _div_rot_tables(velocity, rule)
    psi = pressure.tables(rule).phi
    return np.matmul((div * _dx(velocity, rule)[:, :, None]).transpose(0, 2, 1), psi)


def pressure_coupling(velocity: FeSpace, pressure: FeSpace, degree=None) -> sp.csr_matrix:
    """Rectangular ``D_ij = (psi_j, div Phi_i)`` (velocity rows, pressure columns)."""
    local = pressure_local(velocity, pressure, degree)
    return _pattern(velocity, pressure).assemble(local)


# -- linear forms ------------------------------------------------------


def load_from_values(space: FeSpace, values, rule: QuadratureRule) -> np.ndarray:
    """``b_i = integral of f . Phi_i`` from ``f`` sampled at quadrature points."""
    tab = space.tables(rule)
    vals = np.asarray(values, dtype=float)
    if space.ncomp == 1:
        local = (vals * tab.dx) @ tab.phi
    else:
        local = np.matmul((vals * tab.dx[:, :, None]).transpose(0, 2, 1), tab.phi).reshape(len(tab.dx), -1)
    return _scatter_vector(space, local)


def _sample(space, f, t, rule):
    mesh = space.mesh
    ne, nq = mesh.n_triangles, len(rule)
    if not callable(f):
        val = np.asarray(f, dtype=float)
        shape = (ne, nq) if space.ncomp == 1 else (ne, nq, 2)
        return np.broadcast_to(val, shape)
    xq = space.tables(rule).points
    x, y = xq[..., 0], xq[..., 1]
    out = f(x, y) if t is None else f(t, x, y)
    if space.ncomp == 1:
        return np.broadcast_to(np.asarray(out, dtype=float), (ne, nq))
    return np.stack([np.broadcast_to(np.asarray(o, dtype=float), (ne, nq)) for o in out], axis=-1)


def load_vector(space: FeSpace, f, t=None, degree=None) -> np.ndarray:
    """``b_i = integral of f . Phi_i``.

    ``f`` is a constant, ``f(x, y)`` or, when ``t`` is given, ``f(t, x, y)``.
    Vector spaces expect a pair of component values.
    """
    rule = _rule(degree, space)
    return load_from_values(space, _sample(space, f, t, rule), rule)


def div_load(space: FeSpace, values, rule: QuadratureRule, rot_values=None) -> np.ndarray:
    """``b_i = (g, div Phi_i) [+ (r, rot Phi_i)]`` from samples at quadrature points."""
    div, rot = _div_rot_tables(space, rule)
    dx = _dx(space, rule)
    local = np.matmul((dx * values)[:, None, :], div)[:, 0, :]
    if rot_values is not None:
        local += np.matmul((dx * rot_values)[:, None, :], rot)[:, 0, :]
    return _scatter_vector(space, local)


def gradient_load(space: FeSpace, values, rule: QuadratureRule) -> np.ndarray:
    """``b_i = (G, grad Phi_i)``; ``G`` is ``(ne, nq, 2)`` or ``(ne, nq, 2, 2)``."""
    tab = space.tables(rule)
    g, dx = tab.grads, tab.dx
    vals = np.asarray(values, dtype=float) * (dx[:, :, None, None] if space.ncomp == 2 else dx[:, :, None])
    if space.ncomp == 1:
        local = np.einsum("eqd,eqid->ei", vals, g)
    else:
        # (ne, nq, 2c, 2d) x (ne, nq, nloc, 2d) -> sum over q, d
        local = np.einsum("eqcd,eqid->eci", vals, g, optimize=True).reshape(len(dx), -1)
    return _scatter_vector(space, local)


def flux_rhs(space_s: FeSpace, u_m: FieldFunction, s_prev: FieldFunction, n_m: FieldFunction,
             w_m: FieldFunction, c_prev: FieldFunction, alpha: float, beta: float, degree=None) -> np.ndarray:
    """``b_i = (u_m . s_prev + (alpha n_m + beta w_m) c_prev, div Phi_i)``."""
    if space_s.kind is not SpaceKind.VECTOR_P1_NT:
        raise AssemblyError("flux_rhs is tested against the flux space")
    if u_m.space.ncomp != 2 or s_prev.space.ncomp != 2:
        raise AssemblyError("u_m and s_prev must be vector fields")
    if any(f.space.ncomp != 1 for f in (n_m, w_m, c_prev)):
        raise AssemblyError("n_m, w_m, c_prev must be scalar fields")
    _same_mesh(space_s, u_m.space, s_prev.space, n_m.space, w_m.space, c_prev.space)
    # u_m . s_prev is at most quartic and div Phi_i is constant
    rule = triangle_quadrature(DEFAULT_DEGREE if degree is None else degree)
    uq, sq = u_m.values_at(rule), s_prev.values_at(rule)
    g = uq[..., 0] * sq[..., 0] + uq[..., 1] * sq[..., 1]
    if alpha or beta:
        g = g + (alpha * n_m.values_at(rule) + beta * w_m.values_at(rule)) * c_prev.values_at(rule)
    return div_load(space_s, g, rule)
