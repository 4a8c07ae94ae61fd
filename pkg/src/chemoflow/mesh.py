"""Structured triangulations of axis-aligned rectangles.

Vertices are numbered row by row (x fastest). Every cell is split along
its lower-left to upper-right diagonal, so ``generate_rect_mesh`` is fully
deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEFT, RIGHT, BOTTOM, TOP = 0, 1, 2, 3
SIDE_NAMES = ("left", "right", "bottom", "top")


class MeshError(ValueError):
    """Invalid mesh construction arguments."""


class DegenerateElementError(MeshError):
    """A triangle with (numerically) zero area."""


def triangle_geometry(p0, p1, p2):
    """Area and barycentric gradients of the triangle ``(p0, p1, p2)``.

    Returns ``(area, grads)`` with ``grads[i]`` the gradient of the i-th
    barycentric coordinate. Vertices must be counter-clockwise.
    """
    p0, p1, p2 = (np.asarray(p, dtype=float) for p in (p0, p1, p2))
    e1 = p1 - p0
    e2 = p2 - p0
    det = e1[0] * e2[1] - e1[1] * e2[0]
    scale = max(np.dot(e1, e1), np.dot(e2, e2))
    if scale == 0.0 or abs(det) <= 1e-14 * scale:
        raise DegenerateElementError(f"degenerate triangle {p0}, {p1}, {p2}")
    if det < 0:
        raise DegenerateElementError("triangle is clockwise")
    # rows of inv(J)^T give grad(lambda_1), grad(lambda_2)
    g1 = np.array([e2[1], -e2[0]]) / det
    g2 = np.array([-e1[1], e1[0]]) / det
    grads = np.array([-g1 - g2, g1, g2])
    return 0.5 * det, grads


def _batch_geometry(vertices, triangles):
    p = vertices[triangles]  # (ne, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    scale = np.maximum((e1**2).sum(1), (e2**2).sum(1))
    bad = det <= 1e-14 * scale
    if np.any(bad):
        t = int(np.flatnonzero(bad)[0])
        raise DegenerateElementError(f"triangle {t} has non-positive area")
    g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return 0.5 * det, grads


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with boundary tags and cached geometry.

    ``boundary_edges`` is an ``(nb, 2)`` array of vertex pairs and
    ``edge_sides`` holds the side tag (``LEFT``..``TOP``) of each edge.
    ``vertex_sides`` is an ``(nv, 4)`` boolean table: entry ``[v, side]``
    is set when vertex ``v`` lies on a boundary edge of that side.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    edge_sides: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    bounds: tuple | None = None
    areas: np.ndarray = field(init=False, repr=False)
    grads: np.ndarray = field(init=False, repr=False)
    vertex_sides: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("triangle references a missing vertex")
        edges = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        sides = np.asarray(self.edge_sides, dtype=np.int64).reshape(-1)
        if len(sides) != len(edges):
            raise MeshError("edge_sides must match boundary_edges")
        areas, grads = _batch_geometry(vertices, triangles)
        vsides = np.zeros((len(vertices), 4), dtype=bool)
        for side in range(4):
            vsides[edges[sides == side].ravel(), side] = True
        set_ = object.__setattr__
        set_(self, "vertices", _frozen(vertices))
        set_(self, "triangles", _frozen(triangles))
        set_(self, "boundary_edges", _frozen(edges))
        set_(self, "edge_sides", _frozen(sides))
        set_(self, "areas", _frozen(areas))
        set_(self, "grads", _frozen(grads))
        set_(self, "vertex_sides", _frozen(vsides))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.vertex_sides.any(axis=1))

    def vertex_tags(self, v: int) -> frozenset:
        return frozenset(SIDE_NAMES[s] for s in np.flatnonzero(self.vertex_sides[v]))

    def h(self) -> float:
        """Largest element diameter."""
        p = self.vertices[self.triangles]
        d = [np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return float(np.max(d))

    def same_as(self, other: "Mesh") -> bool:
        return self is other or (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )


def element_geometry(mesh: Mesh, t: int):
    """``(area, grad_l1, grad_l2, grad_l3)`` of triangle ``t``."""
    if not 0 <= t < mesh.n_triangles:
        raise IndexError(f"triangle index {t} out of range")
    tri = mesh.triangles[t]
    area, g = triangle_geometry(*mesh.vertices[tri])
    return area, g[0], g[1], g[2]


def generate_rect_mesh(nx: int, ny: int, bounds=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Uniform ``nx`` x ``ny`` cell grid on ``bounds = (x0, x1, y0, y1)``."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"cell counts must be positive integers, got {nx}, {ny}")
    nx, ny = int(nx), int(ny)
    x0, x1, y0, y1 = map(float, bounds)
    if not (np.isfinite([x0, x1, y0, y1]).all() and x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate bounds {bounds}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    bottom = np.column_stack([np.arange(nx), np.arange(1, nx + 1)])
    top = bottom + ny * (nx + 1)
    left = np.column_stack([np.arange(ny), np.arange(1, ny + 1)]) * (nx + 1)
    right = left + nx
    edges = np.vstack([left, right, bottom, top])
    sides = np.repeat([LEFT, RIGHT, BOTTOM, TOP], [ny, ny, nx, nx])
    return Mesh(vertices, triangles, edges, sides, bounds=(x0, x1, y0, y1))
