"""Time integration: update formulas, oracles, and the energy ledger."""
import numpy as np
import pytest

from viscofem.dynamics import (
    FullStepper,
    LinearSolver,
    OperatorSet,
    ReducedStepper,
    SolverError,
    State,
    TimeGrid,
    dissipation_increment,
    energy,
    load_time_integral,
    reconstruct_ve,
    simulate,
    step_full,
    step_reduced,
)
from viscofem.assembly import LoadSpec
from viscofem.fespace import Constraints, DirichletBC, FeSpace
from viscofem.material import MaterialModel, MaxwellArm, step_coefficients
from viscofem.mesh import BoundaryKind, BoundaryTag, box_face_tagger, build_box_mesh

MATERIAL = MaterialModel.from_engineering(100.0, 1e5, 0.3, arms=((1e5, 1e-2),))
DIRECT = LinearSolver(method="direct")


def make_problem(n=2, p=1, material=MATERIAL):
    tagger = box_face_tagger(
        faces={"z-": BoundaryTag(BoundaryKind.DIRICHLET, "bottom")}
    )
    mesh = build_box_mesh(n, tagger=tagger)
    space = FeSpace(mesh, p)
    ops = OperatorSet(space, material)
    con = Constraints(space, {"bottom": DirichletBC((0.0, 0.0, 0.0))})
    return ops, con


def admissible_random_state(ops, con, seed, amp=0.01):
    rng = np.random.default_rng(seed)
    n = ops.space.n_dofs
    fields = [con.apply_values(rng.standard_normal(n) * amp, 0.0) for _ in range(3)]
    return State(0.0, fields[0], fields[1], (fields[2],) * len(ops.deviatoric))


def test_zero_state_stays_zero():
    ops, con = make_problem()
    state = State.zero(ops.space, 1)
    for _ in range(3):
        state = step_reduced(state, 0.05, ops, constraints=con, solver=DIRECT)
    assert np.abs(state.u1).max() == 0.0
    assert np.abs(state.u0).max() == 0.0


def test_reconstruct_geometric_decay():
    coeffs = step_coefficients((MaxwellArm(1.0, 0.2),), 0.1)
    z = np.zeros(3)
    uve = (np.array([1.0, -2.0, 3.0]),)
    for _ in range(5):
        uve = reconstruct_ve(z, z, uve, coeffs)
    assert np.allclose(uve[0], coeffs.beta[0] ** 5 * np.array([1.0, -2.0, 3.0]))


def test_reconstruct_memory_discard_at_k_2tau():
    tau = 0.2
    coeffs = step_coefficients((MaxwellArm(1.0, tau),), 2 * tau)
    assert abs(coeffs.beta[0]) < 1e-15
    u_prev = np.array([1.0, 2.0, 3.0])
    u_next = np.array([-1.0, 0.0, 1.0])
    uve = reconstruct_ve(u_prev, u_next, (np.array([9.0, 9.0, 9.0]),), coeffs)
    assert np.allclose(uve[0], coeffs.alpha[0] * (u_prev + u_next))


def test_reconstruct_constant_velocity_geometric_sum():
    tau, k, c = 0.3, 0.05, 2.0
    coeffs = step_coefficients((MaxwellArm(1.0, tau),), k)
    alpha, beta = coeffs.alpha[0], coeffs.beta[0]
    vel = np.array([c])
    uve = (np.zeros(1),)
    for n in range(1, 41):
        uve = reconstruct_ve(vel, vel, uve, coeffs)
        expect = 2 * alpha * c * (1 - beta**n) / (1 - beta)
        assert abs(uve[0][0] - expect) < 1e-13 * abs(expect)
        assert abs(expect - tau * c * (1 - beta**n)) < 1e-13
    # steady state approaches tau * c
    assert abs(uve[0][0] - tau * c) < tau * c * beta**35


def test_step_full_against_dense_block_solve():
    ops, con = make_problem(n=1, p=1)
    k = 0.07
    arm = MATERIAL.arms[0]
    state = admissible_random_state(ops, con, 21)
    nxt = step_full(state, k, ops, constraints=con)

    n = ops.space.n_dofs
    M = ops.mass.toarray()
    KE = ops.elastic.toarray()
    KV = ops.deviatoric[0].toarray()
    big = np.block([
        [M, (k / 2) * KE, (k / 2) * KV],
        [-(k / 2) * KE, KE, np.zeros((n, n))],
        [-(k / 2) * KV, np.zeros((n, n)), (1 + k / (2 * arm.tau)) * KV],
    ])
    rhs = np.concatenate([
        M @ state.u1 - (k / 2) * KE @ state.u0 - (k / 2) * KV @ state.uve[0],
        KE @ (state.u0 + (k / 2) * state.u1),
        KV @ ((k / 2) * state.u1 + (1 - k / (2 * arm.tau)) * state.uve[0]),
    ])
    free = np.concatenate([con.free + i * n for i in range(3)])
    x = np.zeros(3 * n)
    x[free] = np.linalg.solve(big[np.ix_(free, free)], rhs[free])
    for got, want in ((nxt.u1, x[:n]), (nxt.u0, x[n:2 * n]), (nxt.uve[0], x[2 * n:])):
        assert np.abs(got - want).max() < 1e-9 * max(np.abs(want).max(), 1e-12)


@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("n_arms", [0, 1, 5])
def test_reduced_full_equivalence(p, n_arms):
    arms = tuple((1e5 / (m + 1), 10.0 ** (m - 2)) for m in range(n_arms))
    material = MaterialModel.from_engineering(100.0, 1e5, 0.3, arms=arms)
    ops, con = make_problem(n=2, p=p, material=material)

    def body(x, t):
        return np.stack(
            [
                np.sin(3 * x[:, 0]) * (1 + t),
                x[:, 1] ** 2 - 2 * t * x[:, 2],
                np.cos(x[:, 0] * x[:, 1]) * t,
            ],
            axis=1,
        )

    loads = LoadSpec(body_force=body)
    red = ReducedStepper(ops, con, 0.05, loads=loads, solver=DIRECT)
    ful = FullStepper(ops, con, 0.05, loads=loads)
    sr = sf = State.zero(ops.space, n_arms)
    for _ in range(4):
        sr, sf = red.step(sr), ful.step(sf)
    for a, b in [(sr.u1, sf.u1), (sr.u0, sf.u0), *zip(sr.uve, sf.uve)]:
        scale = max(np.abs(b).max(), 1e-30)
        assert np.abs(a - b).max() < 1e-10 * scale


def test_conservation_ledger_free_vibration():
    ops, con = make_problem(n=2, p=2)
    state = admissible_random_state(ops, con, 3)
    res = simulate(
        ops, con, TimeGrid.uniform(0.0, 0.5, 60), state0=state, solver=DIRECT
    )
    first = res.ledger[0]
    total0 = first.total + first.dissipated
    for rec in res.ledger:
        assert abs(rec.total + rec.dissipated - total0) < 1e-12 * total0
    # monotone decay of the energy norm itself
    totals = [rec.total for rec in res.ledger]
    assert all(b <= a + 1e-12 * total0 for a, b in zip(totals, totals[1:]))
    assert res.ledger[-1].dissipated > 0


def test_elastic_limit_exact_conservation():
    material = MaterialModel.from_engineering(100.0, 1e5, 0.3, arms=())
    ops, con = make_problem(n=2, p=1, material=material)
    state = admissible_random_state(ops, con, 5)
    res = simulate(
        ops, con, TimeGrid.uniform(0.0, 0.5, 40), state0=state, solver=DIRECT
    )
    total0 = res.ledger[0].total
    for rec in res.ledger:
        assert abs(rec.total - total0) < 1e-12 * total0
        assert rec.dissipated == 0.0


def test_load_time_integral_constant_and_linear():
    ops, con = make_problem(n=1, p=1)
    space = ops.space
    c = np.array([1.0, -2.0, 0.5])
    loads = LoadSpec(body_force=lambda x, t: np.broadcast_to(c, (len(x), 3)))
    k = 0.3
    vec = load_time_integral(loads, space, 0.2, 0.2 + k)
    from viscofem.assembly import assemble_load

    single = assemble_load(space, loads, 0.0)
    assert np.abs(vec - k * single).max() < 1e-12 * np.abs(single).max()

    # traction linear in time: trapezoid is exact
    g = lambda x, t, n: (1.0 + 2.0 * t) * n
    tr = LoadSpec(traction=g)
    vec2 = load_time_integral(tr, space, 0.0, k)
    mid_val = 1.0 + 2.0 * (k / 2)
    ref = assemble_load(space, LoadSpec(traction=lambda x, t, n: mid_val * n), 0.0)
    assert np.abs(vec2 - k * ref).max() < 1e-12 * np.abs(k * ref).max()


def test_load_time_integral_quadratic_gauss_exact():
    ops, con = make_problem(n=1, p=1)
    space = ops.space
    c = np.array([1.0, 0.0, 0.0])
    loads = LoadSpec(
        body_force=lambda x, t: (3 * t * t - t + 2) * np.broadcast_to(c, (len(x), 3))
    )
    t0, t1 = 0.4, 0.9
    vec = load_time_integral(loads, space, t0, t1)
    # integral of (3t^2 - t + 2) over [t0, t1], computed symbolically
    anti = lambda t: t**3 - t**2 / 2 + 2 * t
    from viscofem.assembly import assemble_load

    base = assemble_load(
        space, LoadSpec(body_force=lambda x, t: np.broadcast_to(c, (len(x), 3))), 0.0
    )
    expect = (anti(t1) - anti(t0)) * base
    assert np.abs(vec - expect).max() < 1e-12 * np.abs(expect).max()


def test_energy_report_fields():
    ops, con = make_problem(n=1, p=1)
    zero = State.zero(ops.space, 1)
    rec = energy(zero, ops)
    assert rec.kinetic == rec.elastic == rec.viscoelastic_total == 0.0
    c = ops.space.interpolate(lambda x: np.array([1.0, 1.0, 0.0]) + 0 * x)
    vel_state = State(0.0, c, np.zeros_like(c), (np.zeros_like(c),))
    rec2 = energy(vel_state, ops)
    assert abs(rec2.kinetic - MATERIAL.rho * 2.0) < 1e-10
    assert rec2.elastic == 0.0 and rec2.viscoelastic_total == 0.0


def test_timestep_change_rebuilds_stepper():
    ops, con = make_problem(n=1, p=1)
    state = admissible_random_state(ops, con, 13)
    grid = TimeGrid(np.array([0.0, 0.1, 0.2, 0.25, 0.3]))
    res = simulate(ops, con, grid, state0=state, solver=DIRECT)
    total0 = res.ledger[0].total
    for rec in res.ledger:
        assert abs(rec.total + rec.dissipated - total0) < 1e-11 * total0


def test_cg_solver_matches_direct_and_reports_failure():
    ops, con = make_problem(n=2, p=1)
    state = admissible_random_state(ops, con, 23)
    k = 0.02
    s_cg = step_reduced(
        state, k, ops, constraints=con, solver=LinearSolver(method="cg", rtol=1e-13)
    )
    s_dir = step_reduced(state, k, ops, constraints=con, solver=DIRECT)
    assert np.abs(s_cg.u1 - s_dir.u1).max() < 1e-9 * max(np.abs(s_dir.u1).max(), 1e-30)
    starved = LinearSolver(method="cg", rtol=1e-16, cap_factor=1e-9)
    with pytest.raises(SolverError) as err:
        step_reduced(state, k, ops, constraints=con, solver=starved)
    assert err.value.residual is not None


def test_reduced_full_equivalence_with_slip():
    # slip-constrained annulus: both steppers rotate dofs into the nodal
    # frame and must still produce identical states
    from viscofem.fespace import SlipBC
    from viscofem.mesh import build_annulus_mesh

    material = MaterialModel.from_engineering(1100.0, 0.5e6, 0.39,
                                              arms=((3.5e6, 1e-2),))
    mesh = build_annulus_mesh(0.006, 0.01, 0.02, (2, 8, 2))
    space = FeSpace(mesh, 1)
    ops = OperatorSet(space, material)
    u_n = lambda x, t: -6e-5 * (1.0 + 0.3 * np.sin(4.0 * t))
    con = Constraints(space, {"outer": DirichletBC((0.0, 0.0, 0.0)),
                              "inner": SlipBC(u_n)})
    from viscofem.dynamics import static_solve

    u0 = static_solve(ops, con, solver=DIRECT)
    s0 = State(0.0, np.zeros(space.n_dofs), u0, (np.zeros(space.n_dofs),))
    red = ReducedStepper(ops, con, 0.01, solver=DIRECT)
    ful = FullStepper(ops, con, 0.01)
    sr, sf = s0, s0
    for _ in range(4):
        sr, sf = red.step(sr), ful.step(sf)
    for a, b in [(sr.u1, sf.u1), (sr.u0, sf.u0), (sr.uve[0], sf.uve[0])]:
        scale = max(np.abs(b).max(), 1e-30)
        assert np.abs(a - b).max() < 1e-10 * scale


def test_state_checkpoint_round_trip(tmp_path):
    from viscofem.dynamics import load_state, save_state

    ops, con = make_problem(n=1, p=1)
    state = admissible_random_state(ops, con, 41)
    nxt = step_reduced(state, 0.03, ops, constraints=con, solver=DIRECT)
    path = tmp_path / "checkpoint.npz"
    save_state(nxt, path)
    back = load_state(path)
    assert back.t == nxt.t
    assert np.array_equal(back.u1, nxt.u1)
    assert np.array_equal(back.u0, nxt.u0)
    assert all(np.array_equal(a, b) for a, b in zip(back.uve, nxt.uve))
    # a restarted run continues identically (nonzero initial internal state)
    cont_a = step_reduced(nxt, 0.03, ops, constraints=con, solver=DIRECT)
    cont_b = step_reduced(back, 0.03, ops, constraints=con, solver=DIRECT)
    assert np.array_equal(cont_a.u1, cont_b.u1)


def test_dissipation_increment_matches_energy_loss():
    ops, con = make_problem(n=2, p=1)
    state = admissible_random_state(ops, con, 31)
    k = 0.01
    nxt = step_reduced(state, k, ops, constraints=con, solver=DIRECT)
    before = energy(state, ops).total
    after = energy(nxt, ops).total
    inc = dissipation_increment(state, nxt, ops, k)
    assert abs((before - after) - inc) < 1e-11 * before
