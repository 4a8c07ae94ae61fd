"""Sparse linear solves with constraint elimination.

The reference path is a sparse LU factorization (SuperLU). ``LaggedLUSolver``
offers the iterative alternative used inside the time loop: refinement
preconditioned by the LU factors of an earlier system matrix, refactorized
whenever convergence slows down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50


class SolverError(RuntimeError):
    """Solve did not reach the requested residual."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class SingularMatrixError(SolverError):
    """Structurally or numerically singular system."""

    def __init__(self, message):
        RuntimeError.__init__(self, message)
        self.residual = float("nan")


class ConstraintError(ValueError):
    """Invalid or conflicting constraint specification."""


@dataclass
class LinearSystem:
    """``matrix @ x = rhs`` subject to ``x[dof] = value`` for each constraint."""

    matrix: sp.spmatrix
    rhs: np.ndarray
    constraints: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.matrix.shape[0]


@dataclass
class ReducedSystem:
    """Free-DOF system produced by ``apply_constraints``."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    n: int

    def expand(self, x_free) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.free] = x_free
        x[self.fixed] = self.fixed_values
        return x


def merge_constraints(*pairs) -> dict:
    """Merge ``(dofs, values)`` pairs into one dict, rejecting conflicts."""
    out = {}
    for dofs, values in pairs:
        for d, v in zip(np.asarray(dofs).ravel(), np.broadcast_to(values, np.shape(dofs)).ravel()):
            d, v = int(d), float(v)
            if d in out and out[d] != v:
                raise ConstraintError(f"conflicting values for dof {d}: {out[d]} vs {v}")
            out[d] = v
    return out


def _constraint_arrays(constraints, n):
    if isinstance(constraints, dict):
        items = sorted(constraints.items())
    else:
        items = []
        for d, v in constraints:
            items.append((int(d), float(v)))
        checked = merge_constraints(([d for d, _ in items], [v for _, v in items]))
        items = sorted(checked.items())
    fixed = np.array([d for d, _ in items], dtype=np.int64)
    values = np.array([v for _, v in items], dtype=float)
    if len(fixed) and (fixed.min() < 0 or fixed.max() >= n):
        raise ConstraintError("constraint dof outside the system")
    return fixed, values


def apply_constraints(sys: LinearSystem) -> ReducedSystem:
    """Eliminate constrained DOFs: ``A_ff x_f = b_f - A_fc x_c``."""
    A = sp.csr_matrix(sys.matrix)
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError(f"system matrix must be square, got {A.shape}")
    b = np.asarray(sys.rhs, dtype=float)
    fixed, values = _constraint_arrays(sys.constraints, n)
    if len(fixed) == 0:
        return ReducedSystem(A, b.copy(), np.arange(n), fixed, values, n)
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    Af = A[free]
    rhs = b[free]
    if np.any(values != 0.0):
        rhs = rhs - Af[:, fixed] @ values
    return ReducedSystem(Af[:, free].tocsr(), rhs, free, fixed, values, n)


def relative_residual(A, x, b) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return r / nb if nb > 0 else r


def factorize(A):
    """Sparse LU of ``A``; raises ``SingularMatrixError`` on singularity."""
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"system matrix must be square, got {A.shape}")
    if A.nnz == 0 or np.any(np.diff(A.indptr) == 0):
        raise SingularMatrixError("matrix has an empty column")
    if np.any(np.bincount(A.indices, minlength=A.shape[0]) == 0):
        raise SingularMatrixError("matrix has an empty row")
    try:
        return spla.splu(A)
    except RuntimeError as exc:
        raise SingularMatrixError(f"factorization failed: {exc}") from None


def _refine(A, lu, b, x, tol, steps=3):
    res = relative_residual(A, x, b)
    for _ in range(steps):
        if res <= tol:
            break
        x = x + lu.solve(b - A @ x)
        res = relative_residual(A, x, b)
    return x, res


def solve(sys: LinearSystem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Solve a constrained system; returns the full solution vector.

    ``max_iter`` bounds the iterative-refinement sweeps of the direct path.
    """
    red = apply_constraints(sys)
    if red.matrix.shape[0] == 0:
        return red.expand(np.zeros(0))
    A, b = red.matrix, red.rhs
    lu = factorize(A)
    x = lu.solve(b) if np.any(b) else np.zeros_like(b)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("factorization produced non-finite values")
    x, res = _refine(A, lu, b, x, tol, steps=max_iter)
    if res > tol:
        raise SolverError("direct solve missed tolerance", res)
    return red.expand(x)


class LaggedLUSolver:
    """Iterative refinement with the LU factors of a previously seen matrix.

    Suitable for sequences of systems whose matrices drift slowly (one per
    time step): ``x += LU_old^{-1} (b - A x)`` contracts quickly when
    ``A`` is close to the factored matrix. When more than
    ``refactor_after`` corrections would be needed, the current matrix is
    factorized and solved directly, so the worst case is a direct solve.
    The residual contract of ``solve`` holds on every return.
    """

    def __init__(self, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, refactor_after=6):
        self.tol = tol
        self.max_iter = max_iter
        self.refactor_after = refactor_after
        self._lu = None
        self.factorizations = 0
        self.last_iterations = 0

    def _factor(self, A):
        self._lu = factorize(A)
        self.factorizations += 1

    def solve(self, A, b, x0=None) -> np.ndarray:
        """Solve ``A x = b``; ``x0`` is an optional starting guess."""
        A = sp.csr_matrix(A)
        b = np.asarray(b, dtype=float)
        if not np.any(b):
            self.last_iterations = 0
            return np.zeros_like(b)
        if self._lu is None or self._lu.shape != A.shape:
            self._factor(A)
            return self._direct(A, b)
        lu = self._lu
        nb = np.linalg.norm(b)
        if x0 is None:
            x = lu.solve(b)
        else:
            x = np.array(x0, dtype=float)
            x += lu.solve(b - A @ x)
        for it in range(self.refactor_after + 1):
            r = b - A @ x
            res = np.linalg.norm(r) / nb
            if not np.isfinite(res):
                break
            if res <= self.tol:
                self.last_iterations = it
                return x
            if it < self.refactor_after:
                x += lu.solve(r)
        self._factor(A)
        return self._direct(A, b)

    def _direct(self, A, b):
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("factorization produced non-finite values")
        x, res = _refine(A, self._lu, b, x, self.tol, steps=self.max_iter)
        if res > self.tol:
            raise SolverError("direct solve missed tolerance", res)
        self.last_iterations = 0
        return x
