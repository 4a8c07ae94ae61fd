import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from chemoflow import assembly as asm
from chemoflow import mms
from chemoflow.linsolve import SolverError
from chemoflow.mesh import generate_rect_mesh
from chemoflow.scheme import (
    CondensedStokes,
    Forcing,
    InitialData,
    ModelParams,
    SimulationError,
    State,
    Stepper,
    _SaddleOperator,
    advance,
    build_spaces,
    competition_initial_data,
    elliptic_projection,
    init_state,
    lp_norm,
    monitor_inductive_hypothesis,
    n_steps,
    run_simulation,
    competition_params,
    stokes_projection,
)


def zero_state(S):
    z = lambda sp_: np.zeros(sp_.dof_count)  # noqa: E731
    return State(S, 0, 0.0, z(S.scalar), z(S.scalar), z(S.scalar), z(S.flux), z(S.velocity), z(S.pressure))


def random_state(S, rng, positive=True):
    def f(sp_):
        v = rng.uniform(0.2, 2.0, sp_.dof_count) if positive else rng.standard_normal(sp_.dof_count)
        v[sp_.fixed_dofs] = 0.0
        return v
    return State(S, 0, 0.0, f(S.scalar), f(S.scalar), f(S.scalar), f(S.flux), f(S.velocity),
                 np.zeros(S.pressure.dof_count))


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(Dn=-1.0)
    with pytest.raises(ValueError):
        ModelParams(Du=0.0)
    with pytest.raises(ValueError):
        ModelParams(chi1=-0.1)
    with pytest.raises(ValueError):
        ModelParams(a1=float("nan"))
    assert ModelParams(k=0.0).k == 0.0


def test_zero_is_a_fixed_point(spaces8):
    rng = np.random.default_rng(1)
    z = zero_state(spaces8)
    for _ in range(5):
        vals = rng.uniform(0.1, 5.0, 15)
        p = ModelParams(*vals, grad_phi=lambda x, y: (0.0, -9.8))
        dt = float(rng.uniform(1e-3, 0.5))
        new = advance(z, dt, p)
        for name in ("n", "w", "c", "s", "u", "pi"):
            assert not np.any(getattr(new, name)), name
        assert new.t == dt and new.m == 1


def test_conservation_without_reactions(spaces8):
    rng = np.random.default_rng(2)
    prev = random_state(spaces8, rng)
    prev = State(spaces8, 0, 0.0, prev.n, prev.w, prev.c, prev.s, np.zeros(spaces8.velocity.dof_count), prev.pi)
    p = ModelParams(chi1=0, chi2=0, mu1=0, mu2=0, alpha=0, beta=0, Dn=0.7, Dw=1.3, Dc=2.0)
    m = spaces8.scalar.mean_weights
    st = prev
    for _ in range(3):
        new = advance(st, 0.05, p)
        for name in ("n", "w", "c"):
            a, b = m @ getattr(st, name), m @ getattr(new, name)
            assert abs(a - b) <= 1e-9 * abs(a)
        st = new


def test_velocity_energy_decay(spaces8):
    rng = np.random.default_rng(3)
    S = spaces8
    Mu = asm.mass_matrix(S.velocity)
    u = rng.standard_normal(S.velocity.dof_count) * 5
    u[S.velocity.fixed_dofs] = 0.0
    z = np.zeros(S.scalar.dof_count)
    st = State(S, 0, 0.0, z, z, z, np.zeros(S.flux.dof_count), u, np.zeros(S.pressure.dof_count))
    for dt in (1e-3, 0.1, 10.0):
        p = ModelParams(k=1.0, Du=float(rng.uniform(0.1, 2)))
        new = advance(st, dt, p)
        e0, e1 = np.sqrt(st.u @ Mu @ st.u), np.sqrt(new.u @ Mu @ new.u)
        assert e1 <= e0 + 1e-12


def test_step_postconditions(spaces8):
    rng = np.random.default_rng(4)
    S = spaces8
    prev = random_state(S, rng, positive=False)
    new = advance(prev, 0.01, competition_params(2.0, 0.3))
    op = _SaddleOperator(S.velocity, S.pressure)
    assert np.abs(op.divergence_residual(new.u)).max() <= 1e-8
    assert not np.any(new.u[S.velocity.fixed_dofs])
    assert not np.any(new.s[S.flux.fixed_dofs])
    assert abs(S.pressure.mean_weights @ new.pi) <= 1e-12


def test_incompressibility_along_manufactured_run(spaces8):
    S = spaces8
    op = _SaddleOperator(S.velocity, S.pressure)
    worst = []
    run_simulation(S, ModelParams(), InitialData.from_solution(mms.TEST2), 0.02, 0.1,
                   Forcing.from_solution(mms.TEST2),
                   on_step=lambda st: worst.append(np.abs(op.divergence_residual(st.u)).max()))
    assert max(worst) <= 1e-8


def test_condensed_stokes_matches_multiplier_system(spaces8):
    rng = np.random.default_rng(5)
    S = spaces8
    V, P = S.velocity, S.pressure
    u_prev = asm.FieldFunction(V, rng.standard_normal(V.dof_count))
    dt, Du = 0.05, 0.8
    local = asm.block_diag_local(asm.mass_local(V) / dt + Du * asm.stiffness_local(V)
                                 + asm.skew_transport_local(V, u_prev), 2)
    f = rng.standard_normal(V.dof_count)
    cond = CondensedStokes(V, P)
    K, parts = cond.assemble(local)
    u1, p1 = cond.recover(parts, f, spsolve(K.tocsc(), cond.rhs(parts, f)))
    op = _SaddleOperator(V, P)
    F = asm.pattern(V).assemble(local)
    x = spsolve(op.matrix(op.restrict(F)).tocsc(), op.rhs(f))
    u2, p2 = op.split(x)
    assert np.abs(u1 - u2).max() <= 1e-10 * np.abs(u2).max()
    assert np.abs(p1 - p2).max() <= 1e-10 * np.abs(p2).max()


def test_elliptic_projection_examples():
    S = build_spaces(generate_rect_mesh(6, 6))
    one = elliptic_projection(S.scalar, lambda x, y: 1.0 + 0 * x, lambda x, y: (0 * x, 0 * y))
    np.testing.assert_allclose(one, 1.0, rtol=1e-12)
    lin = elliptic_projection(S.scalar, lambda x, y: x, lambda x, y: (1.0 + 0 * x, 0 * y))
    np.testing.assert_allclose(lin, S.mesh.vertices[:, 0], atol=1e-12)
    # the flux projection lands in the constrained space
    ms, t = mms.TEST2, 0.3
    s = elliptic_projection(S.flux, lambda x, y: ms.s(t, x, y), div=lambda x, y: ms.div_s(t, x, y),
                            rot=lambda x, y: ms.rot_s(t, x, y))
    assert not np.any(s[S.flux.fixed_dofs])


def test_elliptic_projection_order():
    n0 = lambda x, y: mms.TEST2.n(0.0, x, y)  # noqa: E731
    g0 = lambda x, y: mms.TEST2.grad_n(0.0, x, y)  # noqa: E731
    errs = []
    for k in (8, 16):
        S = build_spaces(generate_rect_mesh(k, k))
        errs.append(mms.spatial_errors(S.scalar, elliptic_projection(S.scalar, n0, g0), n0, g0)[0])
    (order,) = mms.convergence_orders(errs, [1 / 8, 1 / 16])
    assert 1.8 <= order <= 2.2


def test_stokes_projection_examples(spaces8):
    S = spaces8
    V, P = S.velocity, S.pressure
    zero = InitialData.zero()
    u, pi = stokes_projection(V, P, zero.u, zero.grad_u, zero.pi)
    assert not np.any(u) and not np.any(pi)
    ms = mms.TEST2
    u, pi = stokes_projection(V, P, lambda x, y: ms.u(0, x, y), lambda x, y: ms.grad_u(0, x, y),
                              lambda x, y: ms.pi(0, x, y))
    assert not np.any(u[V.fixed_dofs])
    assert abs(P.mean_weights @ pi) <= 1e-12
    D = asm.pressure_coupling(V, P)
    rule = asm.triangle_quadrature(8)
    g = asm.load_from_values(P, np.zeros((S.mesh.n_triangles, len(rule))), rule)  # div u = 0 exactly
    assert np.abs(D.T @ u - g).max() <= 1e-10


def test_init_state_examples(spaces8):
    S = spaces8
    z = init_state(S, ModelParams(), InitialData.zero())
    assert all(not np.any(getattr(z, k)) for k in ("n", "w", "c", "s", "u", "pi")) and z.t == 0.0
    st = init_state(S, ModelParams(), InitialData.from_solution(mms.TEST2))
    assert not np.any(st.s[S.flux.fixed_dofs])
    zero = InitialData.zero()
    const_c = InitialData(zero.n, zero.grad_n, zero.w, zero.grad_w, lambda x, y: 3.0 + 0 * x, zero.grad_c,
                          zero.s, zero.div_s, zero.rot_s, zero.u, zero.grad_u, zero.pi)
    st = init_state(S, ModelParams(), const_c)
    assert np.abs(st.s).max() <= 1e-12
    np.testing.assert_allclose(st.c, 3.0, rtol=1e-12)


def test_competition_initial_data_derivatives():
    d = competition_initial_data()
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(20):
        x, y = rng.uniform(0, 1, 2)
        for f, g in ((d.n, d.grad_n), (d.w, d.grad_w), (d.c, d.grad_c)):
            fd = ((f(x + h, y) - f(x - h, y)) / (2 * h), (f(x, y + h) - f(x, y - h)) / (2 * h))
            np.testing.assert_allclose(g(x, y), fd, rtol=1e-6, atol=1e-6)
        hh = 1e-4
        lap = (d.c(x + hh, y) + d.c(x - hh, y) + d.c(x, y + hh) + d.c(x, y - hh) - 4 * d.c(x, y)) / hh**2
        assert abs(d.div_s(x, y) - lap) <= 1e-4 * max(1.0, abs(lap))
    S = build_spaces(generate_rect_mesh(16, 16))
    st = init_state(S, competition_params(2, 0.3), d)
    m = S.scalar.mean_weights
    assert m @ st.n == pytest.approx(26.16, rel=2e-3)
    assert m @ st.w == pytest.approx(1.110, rel=2e-3)


def test_monitor_norms(spaces8):
    S = spaces8
    z = zero_state(S)
    assert monitor_inductive_hypothesis(z) == (0.0, 0.0)
    assert lp_norm(S.scalar, np.full(S.scalar.dof_count, 2.0), 10 / 3) == pytest.approx(2.0, rel=1e-13)
    xs = S.mesh.vertices[:, 0]
    fine = build_spaces(generate_rect_mesh(64, 64))
    val = lp_norm(fine.scalar, fine.mesh.vertices[:, 0], 10 / 3)
    assert val == pytest.approx((3 / 13) ** 0.3, rel=1e-4)
    assert lp_norm(S.scalar, xs, 10 / 3) == pytest.approx((3 / 13) ** 0.3, rel=1e-2)


def test_one_step_run_and_determinism(spaces8):
    data = InitialData.from_solution(mms.TEST2)
    f = Forcing.from_solution(mms.TEST2)
    tr = run_simulation(spaces8, ModelParams(), data, 0.1, 0.1, f)
    assert len(tr.rows) == 1 and tr.final.m == 1
    a = run_simulation(spaces8, ModelParams(), data, 0.05, 0.2, f)
    b = run_simulation(spaces8, ModelParams(), data, 0.05, 0.2, f)
    assert a.rows == b.rows
    assert len(a.rows) == 4 and len(a.diagnostics) == 4


def test_snapshots_at_requested_times(spaces8):
    tr = run_simulation(spaces8, ModelParams(), InitialData.from_solution(mms.TEST2), 0.05, 0.2,
                        Forcing.from_solution(mms.TEST2), snapshot_times=(0.0, 0.1, 0.2, 7.0))
    assert sorted(tr.snapshots) == [0.0, 0.1, 0.2]
    assert tr.snapshots[0.1].m == 2


def test_solver_failure_keeps_partial_trajectory(spaces8, monkeypatch):
    orig = Stepper.step

    def failing(self, prev, forcing=None):
        if prev.m == 2:
            raise SolverError("forced failure", 1.0)
        return orig(self, prev, forcing)

    monkeypatch.setattr(Stepper, "step", failing)
    with pytest.raises(SimulationError) as info:
        run_simulation(spaces8, ModelParams(), InitialData.from_solution(mms.TEST2), 0.05, 0.25,
                       Forcing.from_solution(mms.TEST2))
    tr = info.value.trajectory
    assert len(tr.rows) == 2 and tr.final.m == 2


def test_n_steps():
    assert n_steps(1.0, 0.1) == 10
    assert n_steps(5, 1 / 14) == 70
    with pytest.raises(ValueError):
        n_steps(1.0, 0.3)
    with pytest.raises(ValueError):
        n_steps(-1.0, 0.1)
