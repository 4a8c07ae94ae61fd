import numpy as np
import pytest

from chemoflow.mesh import (
    BOTTOM,
    LEFT,
    RIGHT,
    TOP,
    DegenerateElementError,
    Mesh,
    MeshError,
    element_geometry,
    generate_rect_mesh,
    triangle_geometry,
)


def test_smallest_grid():
    m = generate_rect_mesh(1, 1)
    assert (m.n_vertices, m.n_triangles, len(m.boundary_edges)) == (4, 2, 4)


def test_ten_by_ten_counts_and_area():
    m = generate_rect_mesh(10, 10)
    assert m.n_vertices == 121
    assert m.n_triangles == 200
    assert len(m.boundary_edges) == 40
    assert abs(m.areas.sum() - 1.0) <= 1e-12


def test_diagonal_runs_lower_left_to_upper_right():
    m = generate_rect_mesh(1, 1)
    # both triangles share the diagonal (0,0)-(1,1)
    for tri in m.triangles:
        pts = {tuple(m.vertices[v]) for v in tri}
        assert (0.0, 0.0) in pts and (1.0, 1.0) in pts


@pytest.mark.parametrize("nx,ny,bounds", [(3, 5, (0, 1, 0, 1)), (7, 2, (-1.0, 2.5, 0.5, 1.0)), (12, 12, (0, 2, 0, 3))])
def test_geometry_invariants(nx, ny, bounds):
    m = generate_rect_mesh(nx, ny, bounds)
    x0, x1, y0, y1 = bounds
    assert np.all(m.areas > 0)
    assert np.abs(m.grads.sum(axis=1)).max() <= 1e-13 * np.abs(m.grads).max()
    assert abs(m.areas.sum() - (x1 - x0) * (y1 - y0)) <= 1e-12 * (x1 - x0) * (y1 - y0)
    # boundary edges lie exactly on their side
    coords = {LEFT: (0, x0), RIGHT: (0, x1), BOTTOM: (1, y0), TOP: (1, y1)}
    for edge, side in zip(m.boundary_edges, m.edge_sides):
        axis, val = coords[int(side)]
        assert np.all(m.vertices[edge, axis] == val)


def test_edge_incidence():
    m = generate_rect_mesh(4, 3)
    count = {}
    for tri in m.triangles:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e = tuple(sorted((tri[a], tri[b])))
            count[e] = count.get(e, 0) + 1
    boundary = {tuple(sorted(e)) for e in m.boundary_edges}
    for e, c in count.items():
        assert c == (1 if e in boundary else 2)
    assert boundary <= set(count)


def test_corner_tags():
    m = generate_rect_mesh(3, 3)
    assert m.vertex_tags(0) == {"left", "bottom"}
    assert m.vertex_tags(15) == {"right", "top"}
    assert m.vertex_tags(1) == {"bottom"}
    assert m.vertex_tags(5) == frozenset()


def test_regeneration_is_bit_identical():
    a, b = generate_rect_mesh(6, 4), generate_rect_mesh(6, 4)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)
    assert np.array_equal(a.boundary_edges, b.boundary_edges)
    assert a.areas.tobytes() == b.areas.tobytes()


@pytest.mark.parametrize("args", [(0, 1), (1, -2), (1.5, 2)])
def test_bad_counts(args):
    with pytest.raises(MeshError):
        generate_rect_mesh(*args)


def test_degenerate_bounds():
    with pytest.raises(MeshError):
        generate_rect_mesh(2, 2, (0, 0, 0, 1))


def test_reference_triangle_geometry():
    area, g = triangle_geometry((0, 0), (1, 0), (0, 1))
    assert area == 0.5
    np.testing.assert_array_equal(g, [[-1, -1], [1, 0], [0, 1]])


def test_element_geometry_reconstructs_barycentrics(rng):
    m = generate_rect_mesh(3, 2, (0, 2, 0, 1))
    for t in range(m.n_triangles):
        area, *g = element_geometry(m, t)
        assert area > 0
        p = m.vertices[m.triangles[t]]
        lam = np.array([[1 / 3 + gi @ (pj - p.mean(0)) for pj in p] for gi in g])
        np.testing.assert_allclose(lam, np.eye(3), atol=1e-14)
    with pytest.raises(IndexError):
        element_geometry(m, m.n_triangles)


def test_collinear_triangle_is_degenerate():
    with pytest.raises(DegenerateElementError):
        triangle_geometry((0, 0), (1, 0), (2, 0))
    with pytest.raises(DegenerateElementError):
        Mesh(np.array([[0, 0], [1, 0], [2, 0.0]]), np.array([[0, 1, 2]]))


def test_mesh_is_read_only():
    m = generate_rect_mesh(2, 2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0
