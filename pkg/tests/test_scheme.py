import io
import logging

import numpy as np
import pytest

from oracles import merit_1d, projected_gradient_min
from stvf.energy import energy
from stvf.fem import FeSpace, prolong
from stvf.fields import parse_field
from stvf.mesh import Domain, refine, structured_triangle_mesh, uniform_interval_mesh
from stvf.scheme import (
    NewtonError,
    ProblemData,
    SchemeParams,
    Trajectory,
    interpolant_value,
    merit,
    run_trajectory,
    spacetime_l2_diff,
    step,
    step_residual,
    write_snapshots,
)


@pytest.fixture(scope="module")
def line3():
    return FeSpace(uniform_interval_mesh(Domain.interval(0, 1), 4))


@pytest.fixture(scope="module")
def square8():
    return FeSpace(structured_triangle_mesh(Domain.unit_square(), 8, 8))


@pytest.fixture(scope="module")
def disc_data(square8):
    return ProblemData.from_fields(square8, parse_field("smoothed_disc(radius=0.3, width=0.1)"), parse_field("zero"))


def test_params_validation(caplog):
    with pytest.raises(ValueError):
        SchemeParams(eps=0.0, T=1, N=4)
    with pytest.raises(ValueError):
        SchemeParams(eps=2.0, T=1, N=4)
    with pytest.raises(ValueError):
        SchemeParams(eps=0.1, T=1, N=0)
    with pytest.raises(ValueError):
        SchemeParams(eps=0.1, T=1, N=4, delta=-1)
    with caplog.at_level(logging.WARNING):
        p = SchemeParams(eps=0.1, T=1, N=1)
    assert p.tau == 1.0
    assert "exceeds 1/2" in caplog.text
    assert SchemeParams(eps=0.1, T=1, N=4).times().tolist() == [0, 0.25, 0.5, 0.75, 1.0]


def test_zero_state_stays_zero(square8):
    p = SchemeParams(eps=0.1, T=1, N=8, lam=1.0, delta=0.1)
    z = square8.zeros()
    x, info = step(square8, p, z, z, 0.7)
    assert np.array_equal(x.coeffs, np.zeros(square8.n_dofs))
    assert info.iterations == 0


@pytest.mark.parametrize("jac", ["primal-dual", "exact"])
@pytest.mark.parametrize("lam,dW,delta", [(0.0, 0.0, 0.0), (0.3, 0.0, 0.0), (0.3, 0.37, 0.0), (0.3, -0.2, 0.05)])
def test_step_matches_convex_oracle(line3, lam, dW, delta, jac):
    rng = np.random.default_rng(17)
    x_prev = rng.standard_normal(3)
    g = rng.standard_normal(3)
    p = SchemeParams(eps=0.5, T=0.1, N=1, lam=lam, delta=delta, newton_jacobian=jac)
    x, _ = step(line3, p, g, x_prev, dW)
    ref = projected_gradient_min(x_prev, g, dW, 0.1, 0.5, lam, delta, 0.25)
    assert np.abs(x.coeffs - ref).max() <= 1e-8
    # both merits agree at the common minimizer
    assert merit(line3, p, g, x_prev, dW, x.coeffs) == pytest.approx(
        merit_1d(ref, x_prev, g, dW, 0.1, 0.5, lam, delta, 0.25), rel=1e-12
    )


def test_step_unique_from_two_guesses(square8, disc_data):
    p = SchemeParams(eps=0.05, T=1, N=16, lam=1.0)
    x_prev = disc_data.x0.coeffs
    a, _ = step(square8, p, disc_data.g, x_prev, 0.3)
    b, _ = step(square8, p, disc_data.g, x_prev, 0.3, x_init=np.zeros(square8.n_dofs))
    assert np.abs(a.coeffs - b.coeffs).max() <= 1e-8


def test_residual_certificate_and_merit_decrease(square8, disc_data):
    p = SchemeParams(eps=0.02, T=1, N=8, lam=1.0, delta=0.01)
    rng = np.random.default_rng(3)
    x_prev = disc_data.x0.coeffs
    for dW in rng.normal(0, np.sqrt(p.tau), 5):
        x, info = step(square8, p, disc_data.g, x_prev, dW)
        r = step_residual(square8, p, disc_data.g, x_prev, dW, x)
        tol = p.newton_abs_tol * (1 + np.abs(square8.mass @ x_prev).max())
        assert np.abs(r).max() <= tol
        assert info.residual <= info.tolerance == pytest.approx(tol)
        # strict decrease is certified by the cancellation-free changes; raw
        # merit values cannot resolve the last, sub-ulp decrements
        assert all(d < 0 for d in info.merit_decreases)
        assert np.all(np.diff(info.merits) <= 0)
        assert info.iterations <= 25
        x_prev = x.coeffs


def test_jacobian_modes_agree_on_sharp_data(square8):
    data = ProblemData.from_fields(square8, parse_field("disc_indicator(radius=0.3)"), parse_field("zero"))
    out = {}
    for jac in ("primal-dual", "exact"):
        p = SchemeParams(eps=0.05, T=1, N=8, lam=1.0, newton_jacobian=jac, newton_max_iter=400)
        out[jac] = step(square8, p, data.g, data.x0, 0.1)
    a, b = out["primal-dual"], out["exact"]
    assert np.abs(a[0].coeffs - b[0].coeffs).max() <= 1e-8
    # the dual linearization is the robust default on sharp data
    assert a[1].iterations <= 25
    assert a[1].iterations < b[1].iterations
    with pytest.raises(ValueError):
        SchemeParams(eps=0.1, T=1, N=4, newton_jacobian="bfgs")


def test_heat_step_without_tv(square8, disc_data):
    p = SchemeParams(eps=0.1, T=1, N=8, delta=0.2)
    x_prev = disc_data.x0.coeffs
    x, _ = step(square8, p, square8.zeros(), x_prev, 0.0, include_tv=False)
    A = (square8.mass + p.tau * 0.2 * square8.stiffness).toarray()
    direct = np.linalg.solve(A, square8.mass @ x_prev)
    assert np.abs(x.coeffs - direct).max() <= 1e-10


def test_newton_failure_carries_state(square8, disc_data):
    p = SchemeParams(eps=1e-3, T=1, N=2, newton_max_iter=1)
    with pytest.raises(NewtonError) as err:
        run_trajectory(square8, p, disc_data, [0.1, 0.2])
    e = err.value
    assert e.step_index == 1
    assert np.isfinite(e.residual) and e.residual > 0
    assert e.iterate.shape == (square8.n_dofs,)
    assert "step 1" in str(e)


def test_trajectory_single_step_equals_step(square8, disc_data):
    p = SchemeParams(eps=0.1, T=0.25, N=1, lam=1.0)
    traj = run_trajectory(square8, p, disc_data, [0.12])
    x, _ = step(square8, p, disc_data.g, disc_data.x0, 0.12)
    assert np.array_equal(traj.states[1], x.coeffs)
    assert np.array_equal(traj.states[0], disc_data.x0.coeffs)
    assert traj.newton_iterations == [traj.diagnostics[0].iterations]


def test_zero_data_trajectory(square8):
    z = square8.zeros()
    p = SchemeParams(eps=0.1, T=1, N=6, lam=2.0)
    traj = run_trajectory(square8, p, ProblemData(z, z), np.linspace(-1, 1, 6))
    assert not traj.states.any()


def test_trajectory_rejects_wrong_increments(square8, disc_data):
    p = SchemeParams(eps=0.1, T=1, N=4)
    with pytest.raises(ValueError):
        run_trajectory(square8, p, disc_data, [0.0] * 3)


def test_deterministic_dissipation_and_energy_identity(square8, disc_data):
    p = SchemeParams(eps=0.1, T=1, N=32, lam=1.0)
    traj = run_trajectory(square8, p, disc_data, np.zeros(p.N))
    M = square8.mass
    J = lambda c: energy(square8.function(c), disc_data.g, p.eps, p.lam).total
    for i in range(1, p.N + 1):
        a, b = traj.states[i], traj.states[i - 1]
        d = a - b
        assert J(a) + d @ (M @ d) / (2 * p.tau) <= J(b) + 1e-8
        lhs = d @ (M @ a)
        rhs = 0.5 * a @ (M @ a) - 0.5 * b @ (M @ b) + 0.5 * d @ (M @ d)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_streaming_matches_stored(square8, disc_data):
    p = SchemeParams(eps=0.1, T=1, N=8, lam=1.0)
    inc = np.random.default_rng(4).normal(0, np.sqrt(p.tau), p.N)
    seen = []
    a = run_trajectory(square8, p, disc_data, inc)
    b = run_trajectory(square8, p, disc_data, inc, store_states=False, observer=lambda i, x, xp: seen.append(x.copy()))
    assert b.states is None
    assert np.array_equal(a.final, b.final)
    assert np.array_equal(np.array(seen), a.states[1:])
    with pytest.raises(ValueError):
        b.state(0)


def _toy_trajectory(space, N=4):
    p = SchemeParams(eps=0.1, T=1, N=N)
    states = np.arange(N + 1)[:, None] * np.ones(space.n_dofs)
    return Trajectory(space, p, states, np.zeros(N), [], states[-1])


def test_interpolants(line3):
    traj = _toy_trajectory(line3)
    val = lambda t, side: interpolant_value(traj, t, side).coeffs[0]
    assert val(0.0, "left") == 0
    assert val(0.0, "right") == 0
    assert val(1.0, "right") == 4
    assert val(1.0, "left") == 3
    assert val(0.25, "right") == 1 and val(0.25, "left") == 1
    assert val(0.3, "right") == 2 and val(0.3, "left") == 1
    with pytest.raises(ValueError):
        val(1.5, "right")
    with pytest.raises(ValueError):
        val(0.5, "middle")


def test_spacetime_diff_same_and_prolonged():
    coarse = FeSpace(structured_triangle_mesh(Domain.unit_square(), 4, 4))
    fine = FeSpace(refine(coarse.mesh))
    data = ProblemData.from_fields(coarse, parse_field("bump"), parse_field("zero"))
    p = SchemeParams(eps=0.1, T=1, N=4, lam=1.0)
    a = run_trajectory(coarse, p, data, [0.1, -0.2, 0.05, 0.3])
    assert spacetime_l2_diff(a, a) == 0.0
    up = np.array([prolong(coarse.function(s), fine).coeffs for s in a.states])
    b = Trajectory(fine, p, up, a.increments, [], up[-1])
    assert spacetime_l2_diff(a, b) <= 1e-12
    with pytest.raises(ValueError):
        spacetime_l2_diff(b, a)


def test_spacetime_diff_closed_form(line3):
    # one step each, constant difference field d over (0, T]
    T = 0.5
    p = SchemeParams(eps=0.1, T=T, N=1)
    d = np.array([0.3, -0.1, 0.7])
    A = Trajectory(line3, p, np.vstack([np.zeros(3), np.zeros(3)]), np.zeros(1), [], np.zeros(3))
    B = Trajectory(line3, p, np.vstack([np.zeros(3), d]), np.zeros(1), [], d)
    h = 0.25
    M = h / 6 * (4 * np.eye(3) + np.eye(3, k=1) + np.eye(3, k=-1))
    assert spacetime_l2_diff(A, B) == pytest.approx(np.sqrt(T * d @ M @ d), rel=1e-14)


def test_spacetime_diff_time_refinement(line3):
    # coarse 1 step vs fine 2 steps: the coarse value is held over both fine cells
    p1, p2 = SchemeParams(eps=0.1, T=1, N=1), SchemeParams(eps=0.1, T=1, N=2)
    u, v, w = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 2.0])
    A = Trajectory(line3, p1, np.vstack([np.zeros(3), u]), np.zeros(1), [], u)
    B = Trajectory(line3, p2, np.vstack([np.zeros(3), v, w]), np.zeros(2), [], w)
    M = line3.mass
    expect = np.sqrt(0.5 * (u - v) @ (M @ (u - v)) + 0.5 * (u - w) @ (M @ (u - w)))
    assert spacetime_l2_diff(A, B) == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError):
        spacetime_l2_diff(B, A)


def test_snapshot_dump(square8, disc_data):
    p = SchemeParams(eps=0.1, T=1, N=4, lam=1.0)
    traj = run_trajectory(square8, p, disc_data, [0.5, 0.0, -0.25, 0.125])
    buf = io.StringIO()
    write_snapshots(traj, [0, 3], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "0 0.0 0.0 0"
    head = lines[square8.n_dofs + 2].split()
    assert head[:3] == ["3", "0.75", "-0.25"]
    assert int(head[3]) == traj.diagnostics[2].iterations
    assert len(lines) == 2 * (square8.n_dofs + 2)


def test_problem_data_descriptors(square8):
    d = ProblemData.from_fields(square8, parse_field("bump(radius=0.3)"), parse_field("zero"))
    assert d.x0_desc.startswith("bump(") and d.g_desc == "zero"
    with pytest.raises(ValueError):
        ProblemData(d.x0, FeSpace(square8.mesh).zeros())
