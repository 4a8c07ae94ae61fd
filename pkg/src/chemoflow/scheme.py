"""Initialization and time stepping for the two-species chemotaxis-fluid model.

Each step performs five linear solves in the order n, w, c, (u, pi), s.
The species equations are implicit in the unknown density with transport,
chemotaxis and competition coefficients lagged; the chemical uses the new
(truncated) densities; the momentum equation uses the new densities in the
buoyancy force; the flux ``s`` uses the new velocity and the previous ``s``
and ``c``.

No time-step restriction is checked. If a sub-solve fails or the fields
blow up, halve ``dt``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import assembly as asm
from .assembly import FieldFunction
from .fespace import FeSpace, SpaceKind
from .linsolve import (
    DEFAULT_TOL,
    LaggedLUSolver,
    LinearSystem,
    SolverError,
    apply_constraints,
    factorize,
    relative_residual,
    solve,
)
from .mesh import Mesh
from .quadrature import triangle_quadrature

log = logging.getLogger(__name__)


# -- data types ---------------------------------------------------------


def _zero_gradient(x, y):
    return 0.0, 0.0


@dataclass(frozen=True)
class ModelParams:
    """Physical coefficients; ``grad_phi(x, y)`` returns the potential gradient."""

    chi1: float = 1.0
    chi2: float = 1.0
    Dn: float = 1.0
    Dw: float = 1.0
    Dc: float = 1.0
    Du: float = 1.0
    mu1: float = 1.0
    mu2: float = 1.0
    a1: float = 1.0
    a2: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 1.0
    k: float = 1.0
    grad_phi: Callable = field(default=_zero_gradient, compare=False)

    def __post_init__(self):
        for f in fields(self):
            if f.name == "grad_phi":
                continue
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"{f.name} must be finite, got {v}")
            if f.name in ("Dn", "Dw", "Dc", "Du"):
                if v <= 0:
                    raise ValueError(f"diffusion coefficient {f.name} must be positive, got {v}")
            elif v < 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")


def competition_params(a1: float, a2: float) -> ModelParams:
    """Coefficient set of the competition experiment, gravity along -y."""
    return ModelParams(chi1=12.0, chi2=15.0, Dn=6.0, Dw=8.0, Dc=1.0, Du=1.0,
                       mu1=0.5, mu2=0.3, a1=a1, a2=a2, alpha=6.0, beta=8.0,
                       gamma=1.0, lam=1.0, k=1.0, grad_phi=lambda x, y: (0.0, -9.8))


@dataclass(frozen=True)
class Spaces:
    mesh: Mesh
    scalar: FeSpace
    flux: FeSpace
    velocity: FeSpace
    pressure: FeSpace


def build_spaces(mesh: Mesh) -> Spaces:
    return Spaces(mesh,
                  FeSpace(mesh, SpaceKind.SCALAR_P1),
                  FeSpace(mesh, SpaceKind.VECTOR_P1_NT),
                  FeSpace(mesh, SpaceKind.MINI),
                  FeSpace(mesh, SpaceKind.PRESSURE_P1))


@dataclass(frozen=True, eq=False)
class State:
    """Coefficient vectors of all unknowns at time level ``m``."""

    spaces: Spaces
    m: int
    t: float
    n: np.ndarray
    w: np.ndarray
    c: np.ndarray
    s: np.ndarray
    u: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        sp_ = self.spaces
        for name, space in (("n", sp_.scalar), ("w", sp_.scalar), ("c", sp_.scalar),
                            ("s", sp_.flux), ("u", sp_.velocity), ("pi", sp_.pressure)):
            v = np.array(getattr(self, name), dtype=float)
            if v.shape != (space.dof_count,):
                raise ValueError(f"{name} has shape {v.shape}, expected ({space.dof_count},)")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def field(self, name) -> FieldFunction:
        space = {"n": self.spaces.scalar, "w": self.spaces.scalar, "c": self.spaces.scalar,
                 "s": self.spaces.flux, "u": self.spaces.velocity, "pi": self.spaces.pressure}[name]
        return FieldFunction(space, getattr(self, name))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, k))) for k in ("n", "w", "c", "s", "u", "pi"))


@dataclass(frozen=True)
class Forcing:
    """Source terms ``F(t, x, y)``; vector sources return two components."""

    F_n: Callable
    F_w: Callable
    F_c: Callable
    F_s: Callable
    F_u: Callable

    @classmethod
    def from_solution(cls, ms) -> "Forcing":
        return cls(ms.forcing_n, ms.forcing_w, ms.forcing_c, ms.forcing_s, ms.forcing_u)


@dataclass(frozen=True)
class InitialData:
    """Initial fields with the derivatives the projections need.

    Scalars come with gradients, the flux ``s = grad c`` with its
    divergence and scalar curl, the velocity with its gradient
    ``((du1/dx, du1/dy), (du2/dx, du2/dy))``. All callables take ``(x, y)``.
    """

    n: Callable
    grad_n: Callable
    w: Callable
    grad_w: Callable
    c: Callable
    grad_c: Callable
    s: Callable
    div_s: Callable
    rot_s: Callable
    u: Callable
    grad_u: Callable
    pi: Callable | None = None

    @classmethod
    def from_solution(cls, ms, t=0.0) -> "InitialData":
        def at(f):
            return lambda x, y: f(t, x, y)
        return cls(at(ms.n), at(ms.grad_n), at(ms.w), at(ms.grad_w), at(ms.c), at(ms.grad_c),
                   at(ms.s), at(ms.div_s), at(ms.rot_s), at(ms.u), at(ms.grad_u), at(ms.pi))

    @classmethod
    def zero(cls) -> "InitialData":
        z = lambda x, y: np.zeros_like(x)  # noqa: E731
        z2 = lambda x, y: (np.zeros_like(x), np.zeros_like(x))  # noqa: E731
        zg = lambda x, y: (z2(x, y), z2(x, y))  # noqa: E731
        return cls(z, z2, z, z2, z, z2, z2, z, z, z2, zg, z)


class _GaussianSum:
    """``sum_i A exp(-a (x - x_i)^2 - b (y - y_i)^2)`` with exact derivatives."""

    def __init__(self, amp, a, b, centers):
        self.amp, self.a, self.b = float(amp), float(a), float(b)
        self.centers = [(float(cx), float(cy)) for cx, cy in centers]

    def _terms(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        for cx, cy in self.centers:
            dx, dy = x - cx, y - cy
            yield dx, dy, self.amp * np.exp(-self.a * dx**2 - self.b * dy**2)

    def __call__(self, x, y):
        return sum(g for _, _, g in self._terms(x, y))

    def grad(self, x, y):
        gx = gy = 0.0
        for dx, dy, g in self._terms(x, y):
            gx = gx - 2.0 * self.a * dx * g
            gy = gy - 2.0 * self.b * dy * g
        return gx, gy

    def laplacian(self, x, y):
        a, b = self.a, self.b
        return sum(g * (4 * a * a * dx**2 - 2 * a + 4 * b * b * dy**2 - 2 * b) for dx, dy, g in self._terms(x, y))


def competition_initial_data() -> InitialData:
    """Planar bumps of the competition experiment: densities entering from
    the left edge, the chemical from the far right; fluid at rest."""
    r = (0.2, 0.5, 1.2)
    sigma = (1.5, 1.8, 2.5)
    n0 = _GaussianSum(120.0, 3.0, 12.0, [(-ri, 0.5) for ri in r])
    w0 = _GaussianSum(8.0, 5.0, 10.0, [(-ri, 0.5) for ri in r])
    c0 = _GaussianSum(180.0, 2.0, 1.5, [(2.5, si) for si in sigma])
    zero = InitialData.zero()
    return InitialData(n0, n0.grad, w0, w0.grad, c0, c0.grad, c0.grad, c0.laplacian,
                       zero.rot_s, zero.u, zero.grad_u, zero.pi)


# -- projections -------------------------------------------------------


def _samples(mesh, rule, f, shape_comps=None):
    xq = asm.quadrature_points(mesh, rule)
    out = f(xq[..., 0], xq[..., 1])
    shape = xq.shape[:2]
    if shape_comps is None:
        return np.broadcast_to(np.asarray(out, dtype=float), shape)
    if shape_comps == 2:
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), shape) for o in out], axis=-1)
    return np.stack([np.stack([np.broadcast_to(np.asarray(o, dtype=float), shape) for o in row], axis=-1)
                     for row in out], axis=-2)


def elliptic_projection(space: FeSpace, value, grad=None, div=None, rot=None, tol=DEFAULT_TOL) -> np.ndarray:
    """H1-type Galerkin projection used for initialization.

    Scalar P1: ``(grad(Pf - f), grad v) + (Pf - f, v) = 0``.
    Flux space: ``(div(Ps - s), div t) + (rot(Ps - s), rot t) + (Ps - s, t) = 0``.
    """
    rule = triangle_quadrature(asm.default_degree(space))
    mesh = space.mesh
    if space.kind is SpaceKind.SCALAR_P1:
        if grad is None:
            raise ValueError("scalar projection needs the gradient")
        A = asm.stiffness_matrix(space) + asm.mass_matrix(space)
        b = asm.load_from_values(space, _samples(mesh, rule, value), rule)
        b += asm.gradient_load(space, _samples(mesh, rule, grad, 2), rule)
    elif space.kind is SpaceKind.VECTOR_P1_NT:
        if div is None or rot is None:
            raise ValueError("flux projection needs divergence and curl")
        A = asm.divdiv_rotrot_matrix(space) + asm.mass_matrix(space)
        b = asm.load_from_values(space, _samples(mesh, rule, value, 2), rule)
        b += asm.div_load(space, _samples(mesh, rule, div), rule, _samples(mesh, rule, rot))
    else:
        raise ValueError(f"no elliptic projection for {space.kind}")
    return solve(LinearSystem(A, b, space.constraints), tol=tol)


class _SaddleOperator:
    """Velocity/pressure block structure with the mean-zero multiplier.

    Unknowns are ``[u_free, pi, lambda]``; rows are momentum (free DOFs),
    continuity (one per pressure basis function) and the mean constraint.
    """

    def __init__(self, velocity: FeSpace, pressure: FeSpace):
        self.velocity, self.pressure = velocity, pressure
        n = velocity.dof_count
        mask = np.ones(n, dtype=bool)
        mask[velocity.fixed_dofs] = False
        self.free = np.flatnonzero(mask)
        self.nu = len(self.free)
        self.np = pressure.dof_count
        self.D = asm.pressure_coupling(velocity, pressure)
        Df = self.D[self.free]
        m = sp.csr_matrix(pressure.mean_weights[None, :])
        self._coupling = sp.bmat([[None, -Df, None],
                                  [Df.T, None, m.T],
                                  [None, m, None]], format="csr")
        self.size = self.nu + self.np + 1

    def restrict(self, A):
        return A[self.free][:, self.free]

    def matrix(self, F_free):
        F = sp.block_diag([F_free, sp.csr_matrix((self.np + 1, self.np + 1))], format="csr")
        return (F + self._coupling).tocsr()

    def rhs(self, f_u, g_p=None):
        b = np.zeros(self.size)
        b[: self.nu] = f_u[self.free]
        if g_p is not None:
            b[self.nu : self.nu + self.np] = g_p
        return b

    def split(self, x):
        u = np.zeros(self.velocity.dof_count)
        u[self.free] = x[: self.nu]
        return u, x[self.nu : self.nu + self.np].copy()

    def divergence_residual(self, u):
        """``(div u, psi_j)`` for every pressure basis function."""
        return self.D.T @ u


class CondensedStokes:
    """Element-wise static condensation of the MINI bubbles.

    Bubble unknowns live on one element, so the momentum and continuity
    equations of an element can be reduced to its vertex velocities and
    pressures before assembly; the result is a P1/P1 system with a
    pressure-pressure block. The mean-zero multiplier is replaced by fixing
    one pressure value and shifting to zero mean afterwards, which gives the
    same velocity and pressure as long as the continuity equation is
    homogeneous (it is in the time loop).
    """

    PIN = 0

    def __init__(self, velocity: FeSpace, pressure: FeSpace):
        if not velocity.has_bubble:
            raise ValueError("condensation needs the MINI velocity space")
        self.velocity, self.pressure = velocity, pressure
        mesh = velocity.mesh
        nl = velocity.nloc
        self.o_loc = np.array([0, 1, 2, nl, nl + 1, nl + 2])
        self.b_loc = np.array([3, nl + 3])
        vmap = np.full(velocity.dof_count, -1, dtype=np.int64)
        vertex = np.concatenate([np.arange(mesh.n_vertices) + c * velocity.scalar_ndofs for c in range(2)])
        free = np.setdiff1d(vertex, velocity.fixed_dofs)
        vmap[free] = np.arange(len(free))
        self.u_free = free
        self.nu = len(free)
        pmap = np.full(pressure.dof_count, -1, dtype=np.int64)
        self.p_keep = np.delete(np.arange(pressure.dof_count), self.PIN)
        pmap[self.p_keep] = self.nu + np.arange(len(self.p_keep))
        self.size = self.nu + len(self.p_keep)
        cells = velocity.cell_dofs
        self.o_dofs = cells[:, self.o_loc]
        self.b_dofs = cells[:, self.b_loc]
        self.p_dofs = pressure.cell_dofs
        self.rows = np.hstack([vmap[self.o_dofs], pmap[self.p_dofs]])
        self.pattern = asm.ElementPattern(self.rows, self.rows, (self.size, self.size))
        self.D = asm.pressure_local(velocity, pressure)
        self.Do = self.D[:, self.o_loc, :]
        self.Db = self.D[:, self.b_loc, :]
        self.m = pressure.mean_weights
        self.area = float(self.m.sum())

    def assemble(self, F):
        """Condensed matrix from element momentum matrices ``F`` (``(ne, 8, 8)``)."""
        o, b = self.o_loc, self.b_loc
        Fbb = F[:, b][:, :, b]
        det = Fbb[:, 0, 0] * Fbb[:, 1, 1] - Fbb[:, 0, 1] * Fbb[:, 1, 0]
        if np.any(det == 0) or not np.all(np.isfinite(det)):
            raise SolverError("singular bubble block")
        inv = np.empty_like(Fbb)
        inv[:, 0, 0], inv[:, 1, 1] = Fbb[:, 1, 1] / det, Fbb[:, 0, 0] / det
        inv[:, 0, 1], inv[:, 1, 0] = -Fbb[:, 0, 1] / det, -Fbb[:, 1, 0] / det
        Fo = F[:, o]
        Foo, Fob = Fo[:, :, o], Fo[:, :, b]
        Fbo = F[:, b][:, :, o]
        X = inv @ Fbo
        Y = inv @ self.Db
        DbT = self.Db.transpose(0, 2, 1)
        ne = len(F)
        local = np.empty((ne, 9, 9))
        local[:, :6, :6] = Foo - Fob @ X
        local[:, :6, 6:] = Fob @ Y - self.Do
        local[:, 6:, :6] = self.Do.transpose(0, 2, 1) - DbT @ X
        local[:, 6:, 6:] = DbT @ Y
        return self.pattern.assemble(local), (inv, Fob, Fbo)

    def _scatter(self, local):
        rows = self.rows.ravel()
        keep = rows >= 0
        return np.bincount(rows[keep], weights=local.ravel()[keep], minlength=self.size)

    def rhs(self, parts, f_u):
        inv, Fob, _ = parts
        y = np.einsum("eij,ej->ei", inv, f_u[self.b_dofs])
        local = np.hstack([-np.einsum("eij,ej->ei", Fob, y), -np.einsum("eji,ej->ei", self.Db, y)])
        r = self._scatter(local)
        r[: self.nu] += f_u[self.u_free]
        return r

    def recover(self, parts, f_u, x):
        """Velocity (with bubbles) and zero-mean pressure from the condensed solution."""
        inv, _, Fbo = parts
        u = np.zeros(self.velocity.dof_count)
        u[self.u_free] = x[: self.nu]
        pi = np.zeros(self.pressure.dof_count)
        pi[self.p_keep] = x[self.nu :]
        g = f_u[self.b_dofs] - np.einsum("eij,ej->ei", Fbo, u[self.o_dofs]) \
            + np.einsum("eij,ej->ei", self.Db, pi[self.p_dofs])
        u[self.b_dofs] = np.einsum("eij,ej->ei", inv, g)
        pi -= (self.m @ pi) / self.area
        return u, pi


def stokes_projection(velocity: FeSpace, pressure: FeSpace, u, grad_u, pi=None, Du=1.0, tol=DEFAULT_TOL):
    """Discrete Stokes projection of ``(u, pi)``; returns coefficient vectors."""
    rule = triangle_quadrature(asm.default_degree(velocity))
    mesh = velocity.mesh
    G = _samples(mesh, rule, grad_u, 4)
    f = Du * asm.gradient_load(velocity, G, rule)
    if pi is not None:
        f -= asm.div_load(velocity, _samples(mesh, rule, pi), rule)
    div_u = G[..., 0, 0] + G[..., 1, 1]
    g = asm.load_from_values(pressure, div_u, rule)
    op = _SaddleOperator(velocity, pressure)
    Ku = op.restrict(asm.stiffness_matrix(velocity, Du))
    A = op.matrix(Ku)
    b = op.rhs(f, g)
    x = solve(LinearSystem(A, b), tol=tol)
    return op.split(x)


def init_state(spaces: Spaces, params: ModelParams, data: InitialData, tol=DEFAULT_TOL) -> State:
    """Project the initial data onto the discrete spaces (time level 0)."""
    S = spaces
    n = elliptic_projection(S.scalar, data.n, data.grad_n, tol=tol)
    w = elliptic_projection(S.scalar, data.w, data.grad_w, tol=tol)
    c = elliptic_projection(S.scalar, data.c, data.grad_c, tol=tol)
    s = elliptic_projection(S.flux, data.s, div=data.div_s, rot=data.rot_s, tol=tol)
    u, pi = stokes_projection(S.velocity, S.pressure, data.u, data.grad_u, data.pi, params.Du, tol=tol)
    return State(spaces, 0, 0.0, n, w, c, s, u, pi)


# -- time stepping -----------------------------------------------------


class StepError(SolverError):
    """A sub-solve of one time step failed."""

    def __init__(self, equation, cause, m=None):
        RuntimeError.__init__(self, f"{equation}-solve failed at step {m}: {cause}")
        self.equation = equation
        self.m = m
        self.residual = getattr(cause, "residual", float("nan"))


class Stepper:
    """Caches the constant operators and solvers for fixed mesh, params and dt."""

    def __init__(self, spaces: Spaces, params: ModelParams, dt: float, tol: float = DEFAULT_TOL):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.spaces, self.params, self.dt, self.tol = spaces, params, float(dt), tol
        S, p = spaces, params
        self.rule = triangle_quadrature(asm.DEFAULT_DEGREE)
        self.rule_u = triangle_quadrature(asm.BUBBLE_DEGREE)

        # scalar matrices share one pattern and are summed as element arrays
        self.P = asm.pattern(S.scalar)
        M_loc = asm.mass_local(S.scalar, None, self.rule)
        K_loc = asm.stiffness_local(S.scalar)
        self.M = self.P.assemble(M_loc)
        self.base_n = M_loc * (1.0 / dt - p.mu1) + p.Dn * K_loc
        self.base_w = M_loc * (1.0 / dt - p.mu2) + p.Dw * K_loc
        self.base_c = M_loc / dt + p.Dc * K_loc

        self.Ms = asm.mass_matrix(S.flux)
        self.s_red = apply_constraints(LinearSystem(self.Ms / dt + asm.divdiv_rotrot_matrix(S.flux, p.Dc),
                                                    np.zeros(S.flux.dof_count), S.flux.constraints))
        self.s_lu = factorize(self.s_red.matrix)

        self.Mu = asm.mass_matrix(S.velocity)
        self.condensed = CondensedStokes(S.velocity, S.pressure)
        Fu = asm.mass_local(S.velocity, None, self.rule_u) / dt + p.Du * asm.stiffness_local(S.velocity)
        self.Fu_loc = asm.block_diag_local(Fu, 2)
        self.saddle_const = self.condensed.assemble(self.Fu_loc)

        self.solvers = {name: LaggedLUSolver(tol=tol) for name in ("n", "w", "c", "u")}
        if p.k == 0:
            self.solvers["u"]._factor(self.saddle_const[0])

        # density times bubble basis is quartic: exact at degree 5 for constant grad phi
        xq = S.velocity.tables(self.rule).points
        gp = p.grad_phi(xq[..., 0], xq[..., 1])
        self.grad_phi_q = np.stack([np.broadcast_to(np.asarray(g, dtype=float), xq.shape[:2]) for g in gp], axis=-1)

    # helpers

    def _solve(self, name, A, b, m, x0=None):
        try:
            x = self.solvers[name].solve(A, b, x0)
        except SolverError as exc:
            raise StepError(name, exc, m) from exc
        if not np.all(np.isfinite(x)):
            raise StepError(name, "non-finite solution", m)
        return x

    def _forcing_load(self, space, f, t, rule):
        xq = space.tables(rule).points
        vals = f(t, xq[..., 0], xq[..., 1])
        if space.ncomp == 2:
            vals = np.stack([np.broadcast_to(np.asarray(v, dtype=float), xq.shape[:2]) for v in vals], axis=-1)
        return asm.load_from_values(space, vals, rule)

    def step(self, prev: State, forcing: Forcing | None = None) -> State:
        S, p, dt, rule = self.spaces, self.params, self.dt, self.rule
        m, t = prev.m + 1, prev.t + dt
        u_prev = prev.field("u")
        s_prev = prev.field("s")

        P = self.P
        A = asm.skew_transport_local(S.scalar, u_prev)
        C = asm.chemo_local(S.scalar, s_prev)
        n_pos = np.maximum(prev.field("n").values_at(rule), 0.0)
        w_pos = np.maximum(prev.field("w").values_at(rule), 0.0)

        # a) species n
        G = asm.mass_local(S.scalar, p.mu1 * n_pos + p.mu1 * p.a1 * w_pos, rule)
        An = P.assemble(self.base_n + A + G - p.chi1 * C)
        bn = self.M @ prev.n / dt
        if forcing is not None:
            bn += self._forcing_load(S.scalar, forcing.F_n, t, rule)
        n = self._solve("n", An, bn, m, prev.n)

        # b) species w
        G = asm.mass_local(S.scalar, p.mu2 * p.a2 * n_pos + p.mu2 * w_pos, rule)
        Aw = P.assemble(self.base_w + A + G - p.chi2 * C)
        bw = self.M @ prev.w / dt
        if forcing is not None:
            bw += self._forcing_load(S.scalar, forcing.F_w, t, rule)
        w = self._solve("w", Aw, bw, m, prev.w)

        # d) chemical, with the new truncated densities
        n_f, w_f = FieldFunction(S.scalar, n), FieldFunction(S.scalar, w)
        weight = p.alpha * np.maximum(n_f.values_at(rule), 0.0) + p.beta * np.maximum(w_f.values_at(rule), 0.0)
        Ac = P.assemble(self.base_c + A + asm.mass_local(S.scalar, weight, rule))
        bc = self.M @ prev.c / dt
        if forcing is not None:
            bc += self._forcing_load(S.scalar, forcing.F_c, t, rule)
        c = self._solve("c", Ac, bc, m, prev.c)

        # e), f) velocity and pressure, bubbles condensed element by element
        rule_u = self.rule_u
        cond = self.condensed
        if p.k != 0:
            B = asm.block_diag_local(asm.skew_transport_local(S.velocity, u_prev), 2)
            Au, parts = cond.assemble(self.Fu_loc + p.k * B)
        else:
            Au, parts = self.saddle_const
        fu = self.Mu @ prev.u / dt
        if p.gamma or p.lam:
            dens = p.gamma * n_f.values_at(rule) + p.lam * w_f.values_at(rule)
            fu += asm.load_from_values(S.velocity, dens[..., None] * self.grad_phi_q, rule)
        if forcing is not None:
            fu += self._forcing_load(S.velocity, forcing.F_u, t, rule_u)
        u, pi = cond.recover(parts, fu, self._solve("u", Au, cond.rhs(parts, fu), m))

        # c) flux s, with the new velocity and densities, previous s and c
        u_f = FieldFunction(S.velocity, u)
        bs = self.Ms @ prev.s / dt + asm.flux_rhs(S.flux, u_f, s_prev, n_f, w_f, prev.field("c"),
                                                  p.alpha, p.beta)
        if forcing is not None:
            bs += self._forcing_load(S.flux, forcing.F_s, t, rule)
        red = self.s_red
        rhs = bs[red.free]
        try:
            xs = self.s_lu.solve(rhs)
            res = relative_residual(red.matrix, xs, rhs)
            if res > self.tol:
                xs = xs + self.s_lu.solve(rhs - red.matrix @ xs)
                res = relative_residual(red.matrix, xs, rhs)
            if res > self.tol:
                raise SolverError("flux solve missed tolerance", res)
        except SolverError as exc:
            raise StepError("s", exc, m) from exc
        s = red.expand(xs)

        return State(S, m, t, n, w, c, s, u, pi)


def advance(prev: State, dt: float, params: ModelParams, forcing: Forcing | None = None,
            tol: float = DEFAULT_TOL) -> State:
    """One time step from ``prev``; builds the operators from scratch."""
    return Stepper(prev.spaces, params, dt, tol).step(prev, forcing)


# -- diagnostics -------------------------------------------------------


def lp_norm(space: FeSpace, coeffs, p: float, degree: int = asm.DEFAULT_DEGREE) -> float:
    """``(integral |f|^p)^(1/p)`` by quadrature (Euclidean norm for vectors)."""
    rule = triangle_quadrature(degree)
    v = space.values_at(coeffs, rule)
    mag = np.abs(v) if v.ndim == 2 else np.sqrt((v**2).sum(-1))
    dx = 2.0 * space.mesh.areas[:, None] * rule.weights[None, :]
    return float(np.sum(dx * mag**p) ** (1.0 / p))


def monitor_inductive_hypothesis(state: State):
    """``(||s||_{L^{10/3}}, ||c||_{L^{10/3}})``; reported, never enforced."""
    return (lp_norm(state.spaces.flux, state.s, 10.0 / 3.0),
            lp_norm(state.spaces.scalar, state.c, 10.0 / 3.0))


def summary_row(state: State, Mu=None) -> dict:
    S = state.spaces
    m = S.scalar.mean_weights
    if Mu is None:
        Mu = asm.mass_matrix(S.velocity)
    l2u = float(np.sqrt(max(state.u @ (Mu @ state.u), 0.0)))
    return {"t": state.t, "int_n": float(m @ state.n), "int_w": float(m @ state.w),
            "int_c": float(m @ state.c), "l2_u": l2u}


@dataclass
class Trajectory:
    """Per-step totals plus optional snapshots."""

    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    final: State | None = None


class SimulationError(RuntimeError):
    """A run stopped early; ``trajectory`` holds everything computed so far."""

    def __init__(self, message, trajectory, cause=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.cause = cause


def n_steps(T, dt) -> int:
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    N = int(round(T / dt))
    if N < 1 or abs(N * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T = {T} is not a whole number of steps of dt = {dt}")
    return N


def run_simulation(spaces: Spaces, params: ModelParams, initial: InitialData | State, dt: float, T: float,
                   forcing: Forcing | None = None, snapshot_times=(), tol=DEFAULT_TOL,
                   on_step: Callable | None = None, diagnostics: bool = True) -> Trajectory:
    """March from the initial data to ``T`` in steps of ``dt``.

    ``on_step(state)`` is called after every step (and once for the initial
    state). Snapshots are stored at the steps nearest to ``snapshot_times``.
    """
    N = n_steps(T, dt)
    stepper = Stepper(spaces, params, dt, tol)
    state = initial if isinstance(initial, State) else init_state(spaces, params, initial, tol)
    traj = Trajectory()
    wanted = {int(round(ts / dt)): ts for ts in snapshot_times if 0 <= ts <= T + 0.5 * dt}

    def _record(st):
        if st.m > 0:
            traj.rows.append(summary_row(st, stepper.Mu))
            if diagnostics:
                traj.diagnostics.append(monitor_inductive_hypothesis(st))
        if st.m in wanted:
            traj.snapshots[wanted[st.m]] = st
        if on_step is not None:
            on_step(st)

    _record(state)
    for _ in range(N):
        try:
            new = stepper.step(state, forcing)
        except SolverError as exc:
            traj.final = state
            raise SimulationError(str(exc), traj, exc) from exc
        if not new.is_finite():
            traj.final = state
            raise SimulationError(f"non-finite fields at step {new.m}", traj)
        state = new
        _record(state)
    traj.final = state
    return traj
