import numpy as np
import pytest

from chemoflow import mms
from chemoflow.fespace import FeSpace, SpaceKind
from chemoflow.mesh import generate_rect_mesh
from chemoflow.scheme import elliptic_projection

MS = mms.TEST2
H = 1e-5


def d(f, t, x, y, var):
    """Central difference of ``f(t, x, y)`` along ``var``."""
    if var == "t":
        return (np.asarray(f(t + H, x, y)) - np.asarray(f(t - H, x, y))) / (2 * H)
    if var == "x":
        return (np.asarray(f(t, x + H, y)) - np.asarray(f(t, x - H, y))) / (2 * H)
    return (np.asarray(f(t, x, y + H)) - np.asarray(f(t, x, y - H))) / (2 * H)


def lap(f, t, x, y):
    # second differences with a larger step keep round-off small
    h = 1e-4
    return (np.asarray(f(t, x + h, y)) + np.asarray(f(t, x - h, y)) + np.asarray(f(t, x, y + h))
            + np.asarray(f(t, x, y - h)) - 4 * np.asarray(f(t, x, y))) / h**2


def residuals(t, x, y):
    """System residuals of the exact fields, all coefficients 1, no potential."""
    n, w, c = MS.n, MS.w, MS.c
    u = MS.u(t, x, y)
    s = MS.s(t, x, y)
    sx = lambda t_, x_, y_: MS.s(t_, x_, y_)[0]  # noqa: E731
    sy = lambda t_, x_, y_: MS.s(t_, x_, y_)[1]  # noqa: E731

    def species(f):
        ns_x = lambda t_, x_, y_: f(t_, x_, y_) * sx(t_, x_, y_)  # noqa: E731
        ns_y = lambda t_, x_, y_: f(t_, x_, y_) * sy(t_, x_, y_)  # noqa: E731
        return (d(f, t, x, y, "t") + u[0] * d(f, t, x, y, "x") + u[1] * d(f, t, x, y, "y")
                - lap(f, t, x, y) + d(ns_x, t, x, y, "x") + d(ns_y, t, x, y, "y"))

    nv, wv = n(t, x, y), w(t, x, y)
    Fn = species(n) - nv * (1 - nv - wv)
    Fw = species(w) - wv * (1 - nv - wv)
    Fc = (d(c, t, x, y, "t") + u[0] * d(c, t, x, y, "x") + u[1] * d(c, t, x, y, "y")
          - lap(c, t, x, y) + (nv + wv) * c(t, x, y))
    Fu = []
    for k in range(2):
        uk = lambda t_, x_, y_, k=k: MS.u(t_, x_, y_)[k]  # noqa: E731
        Fu.append(d(uk, t, x, y, "t") + u[0] * d(uk, t, x, y, "x") + u[1] * d(uk, t, x, y, "y")
                  - lap(uk, t, x, y) + d(MS.pi, t, x, y, "xy"[k]))
    assert np.allclose(s, [d(c, t, x, y, "x"), d(c, t, x, y, "y")], atol=1e-6)
    return Fn, Fw, Fc, Fu


def test_forcing_matches_finite_differences():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        t = rng.uniform(0, 1)
        x, y = rng.uniform(0.01, 0.99, 2)
        Fn, Fw, Fc, Fs, Fu = mms.forcing_at(t, (x, y))
        rn, rw, rc, ru = residuals(t, x, y)
        fs_fd = [d(MS.forcing_c, t, x, y, "x"), d(MS.forcing_c, t, x, y, "y")]
        worst = max(worst, abs(Fn - rn), abs(Fw - rw), abs(Fc - rc),
                    np.abs(np.subtract(Fu, ru)).max(), np.abs(np.subtract(Fs, fs_fd)).max())
    assert worst <= 1e-5, worst


def test_forcing_s_is_gradient_of_forcing_c():
    rng = np.random.default_rng(6)
    for _ in range(100):
        t = rng.uniform(0, 2)
        x, y = rng.uniform(0, 1, 2)
        Fs = MS.forcing_s(t, x, y)
        fd = [d(MS.forcing_c, t, x, y, "x"), d(MS.forcing_c, t, x, y, "y")]
        assert np.abs(np.subtract(Fs, fd)).max() <= 1e-5


def test_exact_values_at_origin():
    n, w, c, s, u, pi = mms.exact_fields(0.0, (0.0, 0.0))
    assert (n, w, c) == pytest.approx((5.0, 6.0, 10.0), abs=1e-14)
    np.testing.assert_allclose(s, [0.0, 0.0], atol=1e-14)


def test_boundary_identities():
    rng = np.random.default_rng(8)
    t = rng.uniform(0, 3, 1000)
    r = rng.uniform(0, 1, 1000)
    for side in range(4):
        x = [np.zeros(1000), np.ones(1000), r, r][side]
        y = [r, r, np.zeros(1000), np.ones(1000)][side]
        normal = [(-1, 0), (1, 0), (0, -1), (0, 1)][side]
        u = MS.u(t, x, y)
        assert np.abs(u).max() <= 1e-12
        s = MS.s(t, x, y)
        assert np.abs(normal[0] * s[0] + normal[1] * s[1]).max() <= 1e-12
        for g in (MS.grad_n, MS.grad_w, MS.grad_c):
            gx, gy = g(t, x, y)
            assert np.abs(normal[0] * gx + normal[1] * gy).max() <= 1e-12


def test_divergence_free_and_zero_mean_pressure():
    rng = np.random.default_rng(9)
    for _ in range(50):
        t = rng.uniform(0, 2)
        x, y = rng.uniform(0.05, 0.95, 2)
        div = d(lambda *a: MS.u(*a)[0], t, x, y, "x") + d(lambda *a: MS.u(*a)[1], t, x, y, "y")
        assert abs(div) <= 1e-8
        assert abs(MS.div_u(t, x, y)) <= 1e-12
    xs = (np.arange(400) + 0.5) / 400
    X, Y = np.meshgrid(xs, xs)
    assert abs(MS.pi(0.7, X, Y).mean()) <= 1e-10


def test_forcings_decay():
    vals = np.concatenate([np.ravel(v) for v in mms.forcing_at(60.0, (0.3, 0.6))])
    assert np.abs(vals).max() <= 1e-20


@pytest.fixture(scope="module")
def scalar16():
    return FeSpace(generate_rect_mesh(16, 16), SpaceKind.SCALAR_P1)


def test_spatial_errors_examples(scalar16):
    n0 = lambda x, y: MS.n(0.0, x, y)  # noqa: E731
    gn0 = lambda x, y: MS.grad_n(0.0, x, y)  # noqa: E731
    l2, _ = mms.spatial_errors(scalar16, np.zeros(scalar16.dof_count), n0, gn0)
    assert abs(l2 - np.sqrt(10.0)) <= 1e-6
    proj = elliptic_projection(scalar16, n0, gn0)
    e_proj = mms.spatial_errors(scalar16, proj, n0, gn0)[0]
    assert e_proj < 0.05 * l2
    const = mms.spatial_errors(scalar16, np.full(scalar16.dof_count, 2.5),
                               lambda x, y: 2.5 + 0 * x, lambda x, y: (0 * x, 0 * y))
    assert max(const) <= 1e-13


def test_accumulate_norms():
    a, b, c = mms.accumulate_norms([(0.3, 0.4)], 0.1)
    assert a == 0.3
    assert b == pytest.approx(np.sqrt(0.1) * 0.5)
    assert c == pytest.approx(0.5)
    N, dt = 40, 0.025
    e = (0.6, 0.8)
    assert mms.accumulate_norms([e] * N, dt)[1] == pytest.approx(1.0 * np.sqrt(N * dt))
    dec = [(1.0 / m, 0.0) for m in range(1, 6)]
    assert mms.accumulate_norms(dec, 0.1)[0] == 1.0
    with pytest.raises(ValueError):
        mms.accumulate_norms([], 0.1)


def test_convergence_orders():
    (o,) = mms.convergence_orders([5.677008e-2, 2.227926e-2], [1 / 10, 1 / 16])
    assert abs(o - 1.9901) <= 5e-3
    assert mms.convergence_orders([1.0, 0.5, 0.25], [0.4, 0.2, 0.1]) == pytest.approx([1.0, 1.0])
    assert mms.convergence_orders([1.0, 0.25], [0.2, 0.1]) == pytest.approx([2.0])
    e = np.array([0.3, 0.11, 0.05])
    h = [0.5, 0.3, 0.2]
    np.testing.assert_allclose(mms.convergence_orders(e, h), mms.convergence_orders(7.5 * e, h), rtol=1e-14)
    with pytest.raises(mms.UndefinedOrderError):
        mms.convergence_orders([0.1, 0.0], [0.2, 0.1])
    with pytest.raises(ValueError):
        mms.convergence_orders([0.1], [0.2])
