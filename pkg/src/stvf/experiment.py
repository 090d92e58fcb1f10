"""Monte Carlo ensembles over Wiener paths and the convergence/stability studies.

Every path is an independent work item keyed by its index; per-path results
are collected in path order before any reduction, so reports do not depend
on the number of worker processes.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import FeSpace, tv_sum
from .fields import Field
from .mesh import Mesh, refine
from .noise import sample_path
from .scheme import NewtonError, ProblemData, SchemeParams, run_trajectory, spacetime_l2_diff

__all__ = [
    "EnsembleSpec",
    "EnsembleReport",
    "ConvergenceRow",
    "ConvergenceTable",
    "run_ensemble",
    "estimate_energy_bound",
    "gronwall_bound",
    "cauchy_study",
    "delta_study",
    "data_stability_study",
    "mean_se",
    "write_energy_csv",
    "write_energy_summary_csv",
    "write_convergence_csv",
]


@dataclass(frozen=True, kw_only=True)
class EnsembleSpec:
    n_paths: int
    seed: int
    params: SchemeParams
    mesh: Mesh
    x0: Field
    g: Field
    zero_noise: bool = False
    workers: int = 1
    quad_order: int = 4
    max_state_reals: int = 10**7
    # extra per-step functionals: (name, f(space, x, x_prev, dW) -> float);
    # must be module-level callables when workers > 1
    functionals: tuple = ()

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise ValueError(f"n_paths must be an integer >= 2, got {self.n_paths}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def with_params(self, **changes) -> EnsembleSpec:
        return replace(self, params=replace(self.params, **changes))


def mean_se(x) -> tuple[float, float]:
    """Sample mean and standard error ``std(ddof=1) / sqrt(n)`` (two-pass)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if np.all(x == x[0]):
        return float(x[0]), 0.0
    m = x.mean()
    var = np.sum((x - m) ** 2) / (n - 1)
    return float(m), float(np.sqrt(var / n))


def _column_mean_se(a):
    out = [mean_se(a[:, j]) for j in range(a.shape[1])]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


# -- parallel driver -----------------------------------------------------------


def _run_block(job):
    kind, common, block = job
    setup, per_path = _KINDS[kind]
    ctx = setup(common)
    out = []
    for k in block:
        try:
            out.append(per_path(ctx, k))
        except NewtonError as exc:
            exc.path_index = int(k)
            raise
    return out


def _map_paths(kind, common, n_paths, workers):
    """Per-path results in path order, computed on ``workers`` processes."""
    idx = list(range(n_paths))
    if workers <= 1:
        return _run_block((kind, common, idx))
    blocks = [b.tolist() for b in np.array_split(np.arange(n_paths), min(workers, n_paths))]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_block, [(kind, common, b) for b in blocks]))
    return [r for part in parts for r in part]


def _increments(spec, k, n):
    if spec.zero_noise:
        return np.zeros(n)
    return sample_path(spec.seed, k, spec.params.T, n).increments


# -- plain ensembles -----------------------------------------------------------


def _setup_ensemble(spec):
    space = FeSpace(spec.mesh)
    data = ProblemData.from_fields(space, spec.x0, spec.g, spec.quad_order)
    return spec, space, data


def _ensemble_path(ctx, k):
    spec, space, data = ctx
    p = spec.params
    N = p.N
    M = space.mass
    sq = np.empty(N + 1)
    inc = np.zeros(N + 1)
    tv = np.empty(N + 1)
    fid = np.zeros(N + 1)
    g = data.g.coeffs

    def record(i, x, x_prev):
        sq[i] = x @ (M @ x)
        if i > 0:
            d = x - x_prev
            inc[i] = d @ (M @ d)
        tv[i] = tv_sum(space, x, p.eps)
        if p.lam:
            r = x - g
            fid[i] = 0.5 * p.lam * (r @ (M @ r))

    extra = {name: np.zeros(N + 1) for name, _ in spec.functionals}
    dW = _increments(spec, k, N)

    def observe(i, x, x_prev):
        record(i, x, x_prev)
        for name, f in spec.functionals:
            extra[name][i] = f(space, x, x_prev, dW[i - 1])

    record(0, data.x0.coeffs, data.x0.coeffs)
    run_trajectory(space, p, data, dW, store_states=False, observer=observe)
    return {"sq_norm": sq, "increment_sq": inc, "J_eps": tv, "J_eps_lam": tv + fid, **extra}


@dataclass
class EnsembleReport:
    n_paths: int
    times: np.ndarray
    per_path: dict  # name -> (n_paths, N + 1)
    means: dict
    ses: dict
    components: dict = field(default_factory=dict)  # name -> (value, se)
    gronwall_bound: float | None = None
    passed: bool | None = None
    notes: dict = field(default_factory=dict)


def run_ensemble(spec: EnsembleSpec) -> EnsembleReport:
    """Per-time means and standard errors of the default functionals.

    Recorded for ``i = 0..N``: ``sq_norm`` (``|X^i|_M^2``), ``increment_sq``
    (``|X^i - X^{i-1}|_M^2``, zero at i = 0), ``J_eps``, ``J_eps_lam`` and any
    ``spec.functionals`` (zero at i = 0).
    """
    results = _map_paths("ensemble", spec, spec.n_paths, spec.workers)
    per_path = {name: np.array([r[name] for r in results]) for name in results[0]}
    means, ses = {}, {}
    for name, a in per_path.items():
        means[name], ses[name] = _column_mean_se(a)
    return EnsembleReport(spec.n_paths, spec.params.times(), per_path, means, ses)


def gronwall_bound(spec: EnsembleSpec, data: ProblemData | None = None) -> float:
    """``2 (T eps |O| + |x0|^2/2 + T lam |g|^2) exp(2T)`` with projected data."""
    p = spec.params
    if data is None:
        data = _setup_ensemble(spec)[2]
    x0, g = data.x0, data.g
    A = p.T * p.eps * spec.mesh.measure + 0.5 * x0.l2_norm() ** 2 + p.T * p.lam * g.l2_norm() ** 2
    return 2.0 * A * math.exp(2.0 * p.T)


def estimate_energy_bound(spec: EnsembleSpec) -> EnsembleReport:
    """Monte Carlo estimate of the four-term discrete energy bound.

    ``max_i E|X^i|^2 + 1/4 E sum |X^k - X^{k-1}|^2 + tau E sum J_eps(X^k)
    + tau lam/2 E sum |X^k|^2`` against the explicit Gronwall constant; the
    report passes when the estimate is at most the constant plus 3 SE.
    """
    p = spec.params
    if p.delta != 0:
        raise ValueError("the energy-bound study needs delta = 0; use delta_study for delta > 0")
    rep = run_ensemble(spec)
    sq = rep.per_path["sq_norm"]
    imax = 1 + int(np.argmax(rep.means["sq_norm"][1:]))
    parts = {
        "max_sq_norm": sq[:, imax],
        "increments_term": 0.25 * rep.per_path["increment_sq"][:, 1:].sum(axis=1),
        "energy_term": p.tau * rep.per_path["J_eps"][:, 1:].sum(axis=1),
        "fidelity_term": 0.5 * p.tau * p.lam * sq[:, 1:].sum(axis=1),
    }
    total = parts["max_sq_norm"] + parts["increments_term"] + parts["energy_term"] + parts["fidelity_term"]
    comps = {name: mean_se(v) for name, v in parts.items()}
    comps["total"] = (sum(comps[n][0] for n in parts), mean_se(total)[1])
    rep.components = comps
    rep.gronwall_bound = gronwall_bound(spec)
    rep.passed = bool(comps["total"][0] <= rep.gronwall_bound + 3.0 * comps["total"][1])
    rep.notes["argmax_time_index"] = imax
    return rep


# -- convergence tables --------------------------------------------------------


@dataclass
class ConvergenceRow:
    level: int
    h: float
    tau: float
    eps: float
    delta: float
    diff: float
    se: float
    monotone: bool | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class ConvergenceTable:
    rows: list
    notes: dict = field(default_factory=dict)

    @property
    def diffs(self) -> list:
        return [r.diff for r in self.rows]

    def _flag(self):
        for prev, row in zip(self.rows, self.rows[1:]):
            row.monotone = bool(row.diff < prev.diff)


def _level_meshes(mesh, n_levels, refine_space):
    meshes = [mesh]
    for _ in range(n_levels - 1):
        meshes.append(refine(meshes[-1]) if refine_space else mesh)
    return meshes


def _setup_cauchy(common):
    spec, n_levels, refine_space = common
    meshes = _level_meshes(spec.mesh, n_levels, refine_space)
    spaces = [FeSpace(meshes[0])]
    for m in meshes[1:]:
        spaces.append(spaces[-1] if m is spaces[-1].mesh else FeSpace(m))
    datas = [ProblemData.from_fields(s, spec.x0, spec.g, spec.quad_order) for s in spaces]
    params = [replace(spec.params, N=spec.params.N * 2**L) for L in range(n_levels)]
    return spec, spaces, datas, params


def _cauchy_path(ctx, k):
    spec, spaces, datas, params = ctx
    n_fine = params[-1].N
    path = sample_path(spec.seed, k, spec.params.T, n_fine)
    w_T = path.checksum()
    trajs = []
    for space, data, p in zip(spaces, datas, params):
        inc = np.zeros(p.N) if spec.zero_noise else path.view(p.N).increments
        # every level must consume the same Brownian path
        if not spec.zero_noise and math.fsum(inc) != w_T:
            raise AssertionError(f"path {k}: coarsened increments do not sum to W(T)")
        trajs.append(run_trajectory(space, p, data, inc))
    return np.array([spacetime_l2_diff(a, b) for a, b in zip(trajs, trajs[1:])])


def cauchy_study(base_spec: EnsembleSpec, n_levels: int, *, refine_space: bool = True) -> ConvergenceTable:
    """Successive-level space-time L2 differences under coupled Brownian paths.

    Level ``L`` uses ``L`` uniform refinements of ``base_spec.mesh`` (or the
    base mesh itself when ``refine_space`` is false) and ``N * 2**L`` time
    steps; all levels of a sample share one fine path. Row ``L`` holds
    ``sqrt(E |X_L - X_{L+1}|^2)`` with a delta-method SE.
    """
    if n_levels < 2:
        raise ValueError("cauchy_study needs n_levels >= 2")
    ctx_meshes = _level_meshes(base_spec.mesh, n_levels, refine_space)
    reals = sum(
        (base_spec.params.N * 2**L + 1) * len(m.interior_vertices) for L, m in enumerate(ctx_meshes)
    )
    if reals > base_spec.max_state_reals:
        raise MemoryError(
            f"cauchy study would hold {reals} state values per path "
            f"(limit {base_spec.max_state_reals}); reduce n_levels or raise max_state_reals"
        )
    results = np.array(
        _map_paths("cauchy", (base_spec, n_levels, refine_space), base_spec.n_paths, base_spec.workers)
    )
    p = base_spec.params
    rows = []
    for L in range(n_levels - 1):
        sq = results[:, L] ** 2
        mean, se = mean_se(sq)
        diff = math.sqrt(mean)
        rows.append(
            ConvergenceRow(
                level=L,
                h=ctx_meshes[L].h_max,
                tau=p.T / (p.N * 2**L),
                eps=p.eps,
                delta=p.delta,
                diff=diff,
                se=se / (2.0 * diff) if diff > 0 else 0.0,
            )
        )
    table = ConvergenceTable(rows, {"per_path_diffs": results})
    table._flag()
    return table


def _setup_delta(common):
    spec, deltas = common
    space = FeSpace(spec.mesh)
    data = ProblemData.from_fields(space, spec.x0, spec.g, spec.quad_order)
    return spec, deltas, space, data


def _delta_path(ctx, k):
    spec, deltas, space, data = ctx
    p0 = replace(spec.params, delta=0.0)
    inc = _increments(spec, k, p0.N)
    ref = run_trajectory(space, p0, data, inc).states
    M = space.mass
    gaps = np.zeros((len(deltas), p0.N + 1))
    for j, delta in enumerate(deltas):

        def record(i, x, x_prev, j=j):
            d = x - ref[i]
            gaps[j, i] = d @ (M @ d)

        run_trajectory(space, replace(p0, delta=delta), data, inc, store_states=False, observer=record)
    return gaps


def delta_study(spec: EnsembleSpec, deltas) -> ConvergenceTable:
    """``max_i E|X^i_delta - X^i_0|_M^2`` per viscosity ``delta`` (coupled paths)."""
    deltas = [float(d) for d in deltas]
    if not deltas or any(d <= 0 for d in deltas):
        raise ValueError("delta_study needs a nonempty list of positive deltas")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly decreasing")
    gaps = np.array(_map_paths("delta", (spec, deltas), spec.n_paths, spec.workers))
    p = spec.params
    rows = []
    for j, delta in enumerate(deltas):
        means, ses = _column_mean_se(gaps[:, j, :])
        i = int(np.argmax(means))
        rows.append(
            ConvergenceRow(spec.mesh.level, spec.mesh.h_max, p.tau, p.eps, delta, float(means[i]), float(ses[i]))
        )
    data = _setup_delta((spec, deltas))[3]
    table = ConvergenceTable(
        rows,
        {
            "x0_h1_seminorm": data.x0.h1_seminorm(),
            "g_h1_seminorm": data.g.h1_seminorm(),
            "per_path_gaps": gaps,
        },
    )
    table._flag()
    return table


def _setup_pairs(common):
    return common


def _pairs_path(ctx, k):
    spec, pairs = ctx
    p = spec.params
    inc = _increments(spec, k, p.N)
    out = np.zeros((len(pairs), p.N + 1))
    for j, (a, b) in enumerate(pairs):
        ta = run_trajectory(a.space, p, a, inc)
        tb = run_trajectory(b.space, p, b, inc)
        D = ta.states - tb.states
        out[j] = np.einsum("ij,ij->i", D, (a.space.mass @ D.T).T)
    return out


def data_stability_study(spec: EnsembleSpec, data_pairs) -> ConvergenceTable:
    """Gap ``max_i E|X^i_a - X^i_b|_M^2`` between runs from two data sets.

    Each row carries the driving data distances ``|x0_a - x0_b|_M^2`` and
    ``lam |g_a - g_b|_M^2`` and their ratio to the gap.
    """
    pairs = list(data_pairs)
    for a, b in pairs:
        if a.space is not b.space:
            raise ValueError("both data sets of a pair must live on the same space")
    gaps = np.array(_map_paths("pairs", (spec, pairs), spec.n_paths, spec.workers))
    p = spec.params
    rows = []
    for j, (a, b) in enumerate(pairs):
        means, ses = _column_mean_se(gaps[:, j, :])
        i = int(np.argmax(means))
        dx = (a.x0 - b.x0).l2_norm() ** 2
        dg = p.lam * (a.g - b.g).l2_norm() ** 2
        dist = dx + dg
        mesh = a.space.mesh
        rows.append(
            ConvergenceRow(
                mesh.level,
                mesh.h_max,
                p.tau,
                p.eps,
                p.delta,
                float(means[i]),
                float(ses[i]),
                extra={
                    "x0_dist": dx,
                    "g_dist": dg,
                    "ratio": float(means[i]) / dist if dist > 0 else math.nan,
                },
            )
        )
    table = ConvergenceTable(rows, {"per_path_gaps": gaps})
    table._flag()
    return table


_KINDS = {
    "ensemble": (_setup_ensemble, _ensemble_path),
    "cauchy": (_setup_cauchy, _cauchy_path),
    "delta": (_setup_delta, _delta_path),
    "pairs": (_setup_pairs, _pairs_path),
}


# -- CSV output ----------------------------------------------------------------


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_energy_csv(report: EnsembleReport, path, tau: float) -> None:
    """Columns ``i t_i mean_sq_norm se cum_energy_sum``.

    ``cum_energy_sum`` is ``tau * sum_{k=1..i} E J_eps(X^k)``.
    """
    cum = np.concatenate([[0.0], np.cumsum(report.means["J_eps"][1:]) * tau])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "t_i", "mean_sq_norm", "se", "cum_energy_sum"])
        for i, t in enumerate(report.times):
            w.writerow([i, _fmt(t), _fmt(report.means["sq_norm"][i]), _fmt(report.ses["sq_norm"][i]), _fmt(cum[i])])


def write_energy_summary_csv(report: EnsembleReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value", "se"])
        for name, (v, se) in report.components.items():
            w.writerow([name, _fmt(v), _fmt(se)])
        w.writerow(["gronwall_bound", _fmt(report.gronwall_bound), ""])
        w.writerow(["n_paths", report.n_paths, ""])
        w.writerow(["pass", _fmt(report.passed), ""])


def write_convergence_csv(table: ConvergenceTable, path) -> None:
    """Columns ``level h tau eps delta diff se monotone`` plus any row extras."""
    extra = list(table.rows[0].extra) if table.rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "h", "tau", "eps", "delta", "diff", "se", "monotone", *extra])
        for r in table.rows:
            w.writerow(
                [r.level, _fmt(r.h), _fmt(r.tau), _fmt(r.eps), _fmt(r.delta), _fmt(r.diff), _fmt(r.se), _fmt(r.monotone)]
                + [_fmt(r.extra[k]) for k in extra]
            )
