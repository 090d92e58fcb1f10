import csv
import math

import numpy as np
import pytest

from stvf.experiment import (
    EnsembleSpec,
    cauchy_study,
    data_stability_study,
    delta_study,
    estimate_energy_bound,
    gronwall_bound,
    mean_se,
    run_ensemble,
    write_convergence_csv,
    write_energy_csv,
    write_energy_summary_csv,
)
from stvf.fem import FeSpace
from stvf.fields import parse_field
from stvf.mesh import Domain, structured_triangle_mesh, uniform_interval_mesh
from stvf.noise import sample_path
from stvf.scheme import NewtonError, ProblemData, SchemeParams, run_trajectory

MESH4 = structured_triangle_mesh(Domain.unit_square(), 4, 4)
DISC = parse_field("smoothed_disc(radius=0.3, width=0.1)")
ZERO = parse_field("zero")


def spec(**kw):
    base = dict(
        n_paths=6,
        seed=42,
        params=SchemeParams(eps=0.1, T=1.0, N=8, lam=1.0),
        mesh=MESH4,
        x0=DISC,
        g=ZERO,
    )
    base.update(kw)
    return EnsembleSpec(**base)


def noise_term(space, x, x_prev, dW):
    """Ito increment (X^{i-1}, 1)_M dW: linear in the Gaussian increment."""
    return float(np.sum(space.mass @ x_prev)) * dW


def test_mean_se_basics():
    assert mean_se([3.0, 3.0, 3.0]) == (3.0, 0.0)
    m, se = mean_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2, rel=1e-15)
    # two-pass stays accurate under a large offset
    m, se = mean_se(1e9 + np.array([1.0, 2.0, 3.0, 4.0]))
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2, rel=1e-9)


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(n_paths=1)
    with pytest.raises(ValueError):
        spec(workers=0)


def test_zero_data_ensemble():
    rep = run_ensemble(spec(n_paths=2, x0=ZERO))
    for name in ("sq_norm", "increment_sq"):
        assert not rep.means[name].any()
        assert not rep.ses[name].any()
    for name, se in rep.ses.items():
        assert not se.any(), name


def test_prefix_of_larger_ensemble():
    small = run_ensemble(spec(n_paths=3))
    big = run_ensemble(spec(n_paths=6))
    for name, a in small.per_path.items():
        assert np.array_equal(a, big.per_path[name][:3])


def test_worker_count_independence():
    a = run_ensemble(spec(n_paths=5, workers=1))
    b = run_ensemble(spec(n_paths=5, workers=3))
    for name in a.per_path:
        assert a.per_path[name].tobytes() == b.per_path[name].tobytes()
        assert a.means[name].tobytes() == b.means[name].tobytes()
        assert a.ses[name].tobytes() == b.ses[name].tobytes()


def test_linear_functional_of_increment_has_zero_mean():
    s = spec(n_paths=400, params=SchemeParams(eps=0.1, T=0.25, N=1), functionals=(("noise", noise_term),))
    rep = run_ensemble(s)
    m, se = rep.means["noise"][1], rep.ses["noise"][1]
    assert se > 0
    assert abs(m) <= 4 * se


def test_path_failure_names_path_and_step():
    s = spec(n_paths=2, params=SchemeParams(eps=1e-3, T=1.0, N=4, newton_max_iter=1))
    with pytest.raises(NewtonError) as err:
        run_ensemble(s)
    assert err.value.path_index == 0 and err.value.step_index == 1
    assert "path 0, step 1" in str(err.value)


def test_gronwall_bound_formula():
    s = spec()
    space = FeSpace(MESH4)
    x0 = ProblemData.from_fields(space, DISC, ZERO).x0
    expect = 2 * (0.1 * 1.0 + 0.5 * x0.l2_norm() ** 2) * math.exp(2)
    assert gronwall_bound(s) == pytest.approx(expect, rel=1e-14)
    # with zero data the bound is linear in eps
    z1 = gronwall_bound(spec(x0=ZERO, params=SchemeParams(eps=0.2, T=1.0, N=8, lam=0.0)))
    z2 = gronwall_bound(spec(x0=ZERO, params=SchemeParams(eps=0.1, T=1.0, N=8, lam=0.0)))
    assert z1 == pytest.approx(2 * z2, rel=1e-14)


def test_energy_bound_zero_data_exact():
    rep = estimate_energy_bound(spec(n_paths=2, x0=ZERO))
    total, se = rep.components["total"]
    assert total == pytest.approx(1.0 * 0.1 * 1.0, rel=1e-13)
    assert se == 0.0
    assert rep.passed


def test_energy_bound_components_sum():
    rep = estimate_energy_bound(spec())
    parts = ("max_sq_norm", "increments_term", "energy_term", "fidelity_term")
    assert rep.components["total"][0] == pytest.approx(sum(rep.components[n][0] for n in parts), abs=1e-12)
    assert rep.passed
    assert rep.notes["argmax_time_index"] >= 1


def test_energy_bound_rejects_viscosity():
    with pytest.raises(ValueError):
        estimate_energy_bound(spec(params=SchemeParams(eps=0.1, T=1.0, N=8, delta=0.1)))


def test_cauchy_zero_data():
    table = cauchy_study(spec(n_paths=2, x0=ZERO, params=SchemeParams(eps=0.1, T=1.0, N=2)), 3)
    assert table.diffs == [0.0, 0.0]
    assert all(r.se == 0.0 for r in table.rows)


def test_cauchy_time_only_closed_form():
    # coarse: 1 step with (a + b); fine: 2 steps with (a, b), same mesh
    mesh = uniform_interval_mesh(Domain.interval(0, 1), 8)
    p = SchemeParams(eps=0.2, T=0.5, N=1, lam=1.0)
    s = EnsembleSpec(n_paths=2, seed=3, params=p, mesh=mesh, x0=parse_field("hat"), g=ZERO)
    table = cauchy_study(s, 2, refine_space=False)
    space = FeSpace(mesh)
    data = ProblemData.from_fields(space, s.x0, s.g)
    M = space.mass.toarray()
    sq = []
    for k in range(2):
        a, b = sample_path(3, k, 0.5, 2).fine_increments
        X = run_trajectory(space, p, data, [a + b]).states[1]
        Y = run_trajectory(space, SchemeParams(eps=0.2, T=0.5, N=2, lam=1.0), data, [a, b]).states
        sq.append(0.25 * ((X - Y[1]) @ M @ (X - Y[1]) + (X - Y[2]) @ M @ (X - Y[2])))
    assert table.diffs[0] == pytest.approx(math.sqrt(np.mean(sq)), rel=1e-12)


def test_cauchy_memory_guard():
    with pytest.raises(MemoryError):
        cauchy_study(spec(max_state_reals=1000), 3)


def test_cauchy_small_study_shape():
    s = spec(n_paths=3, mesh=structured_triangle_mesh(Domain.unit_square(), 2, 2), params=SchemeParams(eps=0.1, T=1.0, N=2, lam=1.0))
    t = cauchy_study(s, 3)
    assert [r.level for r in t.rows] == [0, 1]
    assert t.rows[1].h == pytest.approx(t.rows[0].h / 2)
    assert t.rows[1].tau == t.rows[0].tau / 2
    assert t.rows[0].monotone is None and isinstance(t.rows[1].monotone, bool)


def test_delta_study_validation_and_zero_data():
    s = spec(n_paths=2)
    for bad in ([0.0], [], [0.1, 0.2], [0.1, -0.1]):
        with pytest.raises(ValueError):
            delta_study(s, bad)
    t = delta_study(spec(n_paths=2, x0=ZERO), [0.2, 0.1])
    assert t.diffs == [0.0, 0.0]


def test_delta_study_small():
    t = delta_study(spec(n_paths=3), [0.4, 0.2, 0.1])
    assert all(d > 0 for d in t.diffs)
    assert t.notes["x0_h1_seminorm"] > 0 and t.notes["g_h1_seminorm"] == 0


def test_data_stability_identities():
    space = FeSpace(MESH4)
    a = ProblemData.from_fields(space, DISC, ZERO)
    same = data_stability_study(spec(n_paths=2), [(a, a)])
    assert same.diffs == [0.0]
    b = ProblemData.from_fields(space, DISC, parse_field("bump"))
    s0 = spec(n_paths=2, params=SchemeParams(eps=0.1, T=1.0, N=8, lam=0.0))
    assert data_stability_study(s0, [(a, b)]).diffs == [0.0]
    with pytest.raises(ValueError):
        data_stability_study(s0, [(a, ProblemData.from_fields(FeSpace(MESH4), DISC, ZERO))])


def test_data_stability_smoothing_family():
    mesh = structured_triangle_mesh(Domain.unit_square(), 16, 16)
    space = FeSpace(mesh)
    ref = ProblemData.from_fields(space, parse_field("disc_indicator(radius=0.3)"), ZERO)
    pairs = [
        (ref, ProblemData.from_fields(space, parse_field(f"smoothed_disc(radius=0.3, width={w})"), ZERO))
        for w in (0.2, 0.1)
    ]
    t = data_stability_study(spec(n_paths=4, mesh=mesh), pairs)
    assert t.rows[1].extra["x0_dist"] < t.rows[0].extra["x0_dist"]
    assert t.diffs[1] < t.diffs[0]
    assert t.rows[1].monotone is True
    # the gap at i = 0 is the data distance itself and never grows here
    for r in t.rows:
        assert 0 < r.extra["ratio"] <= 1.0 + 1e-12


def test_csv_writers(tmp_path):
    rep = estimate_energy_bound(spec(n_paths=3))
    write_energy_csv(rep, tmp_path / "e.csv", rep.times[1])
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["i", "t_i", "mean_sq_norm", "se", "cum_energy_sum"]
    assert len(rows) == 10
    assert float(rows[-1][1]) == 1.0
    cum = float(rows[-1][4])
    assert cum == pytest.approx(rep.times[1] * rep.means["J_eps"][1:].sum(), rel=1e-14)
    write_energy_summary_csv(rep, tmp_path / "s.csv")
    summary = {r[0]: r[1] for r in csv.reader(open(tmp_path / "s.csv"))}
    assert summary["pass"] == "true"
    assert float(summary["gronwall_bound"]) == rep.gronwall_bound
    t = delta_study(spec(n_paths=2), [0.2, 0.1])
    write_convergence_csv(t, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["level", "h", "tau", "eps", "delta", "diff", "se", "monotone"]
    assert rows[1][7] == "" and rows[2][7] in ("true", "false")
    assert float(rows[2][5]) == t.diffs[1]
