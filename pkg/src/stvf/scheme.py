"""Implicit Euler-Maruyama time stepping for the regularized stochastic TV flow.

One step finds ``v`` in the P1 space with, for every interior hat,

    M(v - (1 + dW) x_prev) + tau*delta*K v + tau*r_eps(v) + tau*lam*M(v - g) = 0,

where ``r_eps`` is the TV residual. The left side is the gradient of the
strictly convex merit

    Phi(v) = 1/2 |v - (1 + dW) x_prev|_M^2 + tau*delta/2 |v|_K^2
             + tau * sum_T |T| sqrt(|G_T|^2 + eps^2) + tau*lam/2 |v - g|_M^2,

so the step is computed by damped Newton on ``Phi``. ``delta = 0`` gives the
fully discrete scheme; ``delta > 0`` adds the viscosity term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (
    EPS_MIN,
    FeFunction,
    FeSpace,
    SolverError,
    l2_project,
    prolongation_matrix,
    solve_spd,
    tv_jacobian,
    tv_residual,
    tv_sum,
    write_function,
)
from .mesh import ancestors

__all__ = [
    "SchemeParams",
    "ProblemData",
    "StepInfo",
    "Trajectory",
    "NewtonError",
    "step",
    "step_residual",
    "merit",
    "run_trajectory",
    "interpolant_value",
    "spacetime_l2_diff",
    "write_snapshots",
]

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MIN_STEP = 2.0**-40
JACOBIANS = ("primal-dual", "exact")
# fraction of the distance to the unit-ball boundary a dual step may cover
DUAL_FRACTION = 0.99


@dataclass(frozen=True, kw_only=True)
class SchemeParams:
    eps: float
    T: float
    N: int
    delta: float = 0.0
    lam: float = 0.0
    newton_abs_tol: float = 1e-10
    newton_max_iter: int = 50
    linear_rel_tol: float = 1e-12
    newton_jacobian: str = "primal-dual"

    def __post_init__(self):
        if not EPS_MIN <= self.eps <= 1.0:
            raise ValueError(f"eps must lie in [{EPS_MIN:g}, 1], got {self.eps}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        if not self.newton_abs_tol > 0:
            raise ValueError("newton_abs_tol must be positive")
        if int(self.newton_max_iter) != self.newton_max_iter or self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be a positive integer")
        if not 0 < self.linear_rel_tol <= 1e-6:
            raise ValueError("linear_rel_tol must lie in (0, 1e-6]")
        if self.newton_jacobian not in JACOBIANS:
            raise ValueError(f"newton_jacobian must be one of {JACOBIANS}, got {self.newton_jacobian!r}")
        if self.tau > 0.5:
            log.warning("tau = %g exceeds 1/2; the discrete stability estimates assume tau <= 1/2", self.tau)

    @property
    def tau(self) -> float:
        return self.T / self.N

    def times(self) -> np.ndarray:
        return self.T * np.arange(self.N + 1) / self.N


@dataclass(frozen=True)
class ProblemData:
    """Projected initial datum and fidelity target on one space."""

    x0: FeFunction
    g: FeFunction
    x0_desc: str = ""
    g_desc: str = ""

    def __post_init__(self):
        if self.x0.space is not self.g.space:
            raise ValueError("x0 and g must live on the same space")

    @property
    def space(self) -> FeSpace:
        return self.x0.space

    @classmethod
    def from_fields(cls, space: FeSpace, x0, g, quad_order: int = 4) -> ProblemData:
        """L2-project two analytic fields (see :mod:`stvf.fields`)."""
        return cls(
            l2_project(space, x0, quad_order),
            l2_project(space, g, quad_order),
            getattr(x0, "descriptor", ""),
            getattr(g, "descriptor", ""),
        )


@dataclass
class StepInfo:
    iterations: int
    residual: float
    tolerance: float
    merits: list = field(default_factory=list)
    merit_decreases: list = field(default_factory=list)


class NewtonError(RuntimeError):
    """Newton did not converge; carries the last residual and iterate."""

    def __init__(self, message, residual, iterate, step_index=None, path_index=None):
        super().__init__(message)
        self.residual = residual
        self.iterate = iterate
        self.step_index = step_index
        self.path_index = path_index

    def __str__(self):
        where = []
        if self.path_index is not None:
            where.append(f"path {self.path_index}")
        if self.step_index is not None:
            where.append(f"step {self.step_index}")
        prefix = f"[{', '.join(where)}] " if where else ""
        return prefix + super().__str__()


class _Step:
    """Residual, Jacobian and merit of one time step."""

    def __init__(self, space, params, g, x_prev, dW, include_tv=True):
        self.space = space
        self.p = params
        self.tau = params.tau
        self.g = g
        self.include_tv = include_tv
        self.w = (1.0 + dW) * x_prev
        M = space.mass
        self.Mw = M @ self.w
        self.Mg = M @ g
        self.tl = self.tau * params.lam
        self.td = self.tau * params.delta

    def grad_quadratic(self, v):
        """Gradient of the quadratic part of the merit."""
        M, K = self.space.mass, self.space.stiffness
        Mv = M @ v
        out = Mv - self.Mw
        if self.tl:
            out += self.tl * (Mv - self.Mg)
        if self.td:
            out += self.td * (K @ v)
        return out

    def residual(self, v):
        out = self.grad_quadratic(v)
        if self.include_tv:
            out += self.tau * tv_residual(self.space, v, self.p.eps)
        return out

    def jacobian(self, v, dual=None):
        M, K = self.space.mass, self.space.stiffness
        data = (1.0 + self.tl) * M.data
        if self.td:
            data = data + self.td * K.data
        if self.include_tv:
            data = data + self.tau * tv_jacobian(self.space, v, self.p.eps, dual).data
        return sp.csr_matrix((data, M.indices, M.indptr), shape=M.shape)

    def merit(self, v):
        M, K = self.space.mass, self.space.stiffness
        r = v - self.w
        out = 0.5 * r @ (M @ r)
        if self.td:
            out += 0.5 * self.td * v @ (K @ v)
        if self.tl:
            q = v - self.g
            out += 0.5 * self.tl * q @ (M @ q)
        if self.include_tv:
            out += self.tau * tv_sum(self.space, v, self.p.eps)
        return float(out)

    def initial_dual(self, v):
        G = self.space.cell_gradients(v)
        s = np.sqrt(np.einsum("cd,cd->c", G, G) + self.p.eps**2)
        return G / s[:, None]

    def dual_update(self, v, d, w):
        """Linearized dual Newton step for ``s w = G``, kept inside the unit ball."""
        G = self.space.cell_gradients(v)
        D = self.space.cell_gradients(d)
        s = np.sqrt(np.einsum("cd,cd->c", G, G) + self.p.eps**2)
        GD = np.einsum("cd,cd->c", G, D)
        dw = G / s[:, None] - w + (D - (GD / s)[:, None] * w) / s[:, None]
        # largest beta with |w + beta dw| <= 1 per cell (|w| < 1 holds)
        a = np.einsum("cd,cd->c", dw, dw)
        b = 2.0 * np.einsum("cd,cd->c", w, dw)
        c = np.einsum("cd,cd->c", w, w) - 1.0
        moving = a > 0
        beta = 1.0
        if np.any(moving):
            am, bm, cm = a[moving], b[moving], c[moving]
            reach = (-bm + np.sqrt(np.maximum(bm * bm - 4.0 * am * cm, 0.0))) / (2.0 * am)
            beta = min(1.0, DUAL_FRACTION * float(reach.min()))
        return w + beta * dw

    def merit_change(self, v, d, alpha, grad_q):
        """``Phi(v + alpha d) - Phi(v)`` without cancellation."""
        M, K = self.space.mass, self.space.stiffness
        Md = M @ d
        curv = (1.0 + self.tl) * (d @ Md)
        if self.td:
            curv += self.td * d @ (K @ d)
        out = alpha * (d @ grad_q) + 0.5 * alpha * alpha * curv
        if self.include_tv:
            sp_ = self.space
            G = sp_.cell_gradients(v)
            D = sp_.cell_gradients(d)
            eps2 = self.p.eps**2
            s_old = np.sqrt(np.einsum("cd,cd->c", G, G) + eps2)
            Gn = G + alpha * D
            s_new = np.sqrt(np.einsum("cd,cd->c", Gn, Gn) + eps2)
            num = alpha * np.einsum("cd,cd->c", D, 2.0 * G + alpha * D)
            out += self.tau * (sp_.measures @ (num / (s_old + s_new)))
        return float(out)


def _coeffs(space, u):
    if isinstance(u, FeFunction):
        if u.space is not space:
            raise ValueError("function does not belong to the step's space")
        return u.coeffs
    return np.asarray(u, dtype=float)


def step(
    space: FeSpace,
    params: SchemeParams,
    g_h,
    x_prev,
    dW: float,
    *,
    x_init=None,
    include_tv: bool = True,
):
    """Advance one time step; returns ``(X^i, StepInfo)``.

    ``include_tv=False`` drops the TV term (testing hook: the step then is a
    plain implicit Euler step of the linear part).

    With ``params.newton_jacobian == "primal-dual"`` the TV block of the
    Newton matrix uses a cell-wise dual variable ``w ~ G/s`` carried along
    the iteration (Chan-Golub-Mulet linearization). Directions remain descent
    directions for the merit, and the matrix tends to the exact Jacobian as
    the iterates converge; far from the solution it avoids the tiny
    curvature ``eps^2/s^3`` that stalls plain Newton on sharp data.
    """
    xp = _coeffs(space, x_prev)
    g = _coeffs(space, g_h)
    prob = _Step(space, params, g, xp, float(dW), include_tv)
    tol = params.newton_abs_tol * (1.0 + float(np.max(np.abs(space.mass @ xp), initial=0.0)))
    v = np.array(xp if x_init is None else _coeffs(space, x_init), dtype=float)
    info = StepInfo(0, np.inf, tol)
    use_dual = include_tv and params.newton_jacobian == "primal-dual"
    w = prob.initial_dual(v) if use_dual else None
    for it in range(params.newton_max_iter + 1):
        gq = prob.grad_quadratic(v)
        F = gq + (params.tau * tv_residual(space, v, params.eps) if include_tv else 0.0)
        res = float(np.max(np.abs(F)))
        if not np.isfinite(res):
            raise NewtonError("non-finite residual in Newton iteration", res, v)
        info.iterations, info.residual = it, res
        if res <= tol:
            info.merits.append(prob.merit(v))
            return FeFunction(space, v), info
        if it == params.newton_max_iter:
            break
        try:
            d = solve_spd(prob.jacobian(v, w), -F, params.linear_rel_tol)
        except SolverError as exc:
            raise NewtonError(f"linear solve failed at Newton iteration {it}: {exc}", res, v) from exc
        slope = float(F @ d)
        info.merits.append(prob.merit(v))
        alpha = 1.0
        while True:
            change = prob.merit_change(v, d, alpha, gq)
            if change <= ARMIJO * alpha * slope:
                break
            alpha *= 0.5
            if alpha < MIN_STEP:
                raise NewtonError(
                    f"line search failed at Newton iteration {it} (residual {res:.3e})", res, v
                )
        info.merit_decreases.append(change)
        if use_dual:
            w = prob.dual_update(v, d, w)
        v = v + alpha * d
    raise NewtonError(
        f"Newton did not converge in {params.newton_max_iter} iterations "
        f"(residual {info.residual:.3e} > {tol:.3e})",
        info.residual,
        v,
    )


def step_residual(space: FeSpace, params: SchemeParams, g_h, x_prev, dW: float, x_new) -> np.ndarray:
    """Weak-form residual of a step, evaluated independently of the solver."""
    xp = _coeffs(space, x_prev)
    v = _coeffs(space, x_new)
    M, K = space.mass, space.stiffness
    tau = params.tau
    out = M @ (v - xp) - (M @ xp) * dW + tau * tv_residual(space, v, params.eps)
    out = out + tau * params.lam * (M @ (v - _coeffs(space, g_h)))
    if params.delta:
        out = out + tau * params.delta * (K @ v)
    return out


def merit(space: FeSpace, params: SchemeParams, g_h, x_prev, dW: float, v) -> float:
    """Value of the per-step merit whose minimizer is the step solution."""
    return _Step(space, params, _coeffs(space, g_h), _coeffs(space, x_prev), float(dW)).merit(
        _coeffs(space, v)
    )


@dataclass(eq=False)
class Trajectory:
    space: FeSpace
    params: SchemeParams
    states: np.ndarray | None  # (N + 1, n_dofs), None when not stored
    increments: np.ndarray
    diagnostics: list
    final: np.ndarray

    def state(self, i: int) -> FeFunction:
        if self.states is None:
            raise ValueError("trajectory was run without storing states")
        return FeFunction(self.space, self.states[i])

    @property
    def newton_iterations(self) -> list:
        return [d.iterations for d in self.diagnostics]


def run_trajectory(
    space: FeSpace,
    params: SchemeParams,
    data: ProblemData,
    increments,
    *,
    store_states: bool = True,
    observer=None,
    include_tv: bool = True,
) -> Trajectory:
    """Run ``N`` steps from ``data.x0``.

    ``observer(i, x_i, x_prev)`` is called after every step with coefficient
    arrays; with ``store_states=False`` only the final state is kept.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.shape != (params.N,):
        raise ValueError(f"need {params.N} increments, got {inc.shape}")
    if data.space is not space:
        raise ValueError("problem data lives on a different space")
    x = data.x0.coeffs
    g = data.g.coeffs
    states = np.empty((params.N + 1, space.n_dofs)) if store_states else None
    if store_states:
        states[0] = x
    diags = []
    for i in range(1, params.N + 1):
        try:
            xn, info = step(space, params, g, x, inc[i - 1], include_tv=include_tv)
        except NewtonError as exc:
            exc.step_index = i
            raise
        xn = xn.coeffs
        diags.append(info)
        if store_states:
            states[i] = xn
        if observer is not None:
            observer(i, xn, x)
        x = xn
    if states is not None:
        states.setflags(write=False)
    return Trajectory(space, params, states, inc, diags, x)


def _time_index(traj: Trajectory, t: float, side: str) -> int:
    T, N = traj.params.T, traj.params.N
    if not 0.0 <= t <= T:
        raise ValueError(f"t = {t} outside [0, {T}]")
    k = t * N / T
    kr = round(k)
    on_node = abs(k - kr) <= 1e-12 * max(1, N)
    if side == "right":
        # X^i on (t_{i-1}, t_i]; X^0 at t = 0
        return int(kr) if on_node else math.ceil(k)
    if side == "left":
        # X^{i-1} on [t_{i-1}, t_i); X^{N-1} at t = T
        i = int(kr) if on_node else math.floor(k)
        return min(i, N - 1)
    raise ValueError(f"side must be 'right' or 'left', got {side!r}")


def interpolant_value(traj: Trajectory, t: float, side: str = "right") -> FeFunction:
    """Piecewise-constant time interpolant: right (``X^i`` on ``(t_{i-1}, t_i]``)
    or left (``X^{i-1}`` on ``[t_{i-1}, t_i)``)."""
    return traj.state(_time_index(traj, t, side))


def spacetime_l2_diff(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """``L2(0, T; L2)`` distance of the right interpolants of two trajectories.

    ``traj_b`` must live on the same mesh or a refinement descendant, with a
    step count that is a multiple of ``traj_a``'s.
    """
    pa, pb = traj_a.params, traj_b.params
    if not math.isclose(pa.T, pb.T, rel_tol=1e-14):
        raise ValueError("trajectories have different final times")
    if pb.N % pa.N:
        raise ValueError(f"N = {pb.N} is not a multiple of N = {pa.N}")
    if not any(m is traj_a.space.mesh for m in ancestors(traj_b.space.mesh)):
        raise ValueError("second trajectory's mesh does not descend from the first's")
    if traj_a.states is None or traj_b.states is None:
        raise ValueError("spacetime_l2_diff needs stored states")
    r = pb.N // pa.N
    if traj_a.space is traj_b.space:
        A = traj_a.states[1:]
    else:
        P = prolongation_matrix(traj_a.space, traj_b.space)
        A = (P @ traj_a.states[1:].T).T
    A = np.repeat(A, r, axis=0)
    D = A - traj_b.states[1:]
    M = traj_b.space.mass
    sq = np.einsum("ij,ij->i", D, (M @ D.T).T)
    return float(np.sqrt(pb.tau * sq.sum()))


def write_snapshots(traj: Trajectory, indices, stream) -> None:
    """Header ``i t_i dW_i newton_iters`` followed by the function dump, per index."""
    t = traj.params.times()
    for i in indices:
        i = int(i)
        dW = traj.increments[i - 1] if i > 0 else 0.0
        iters = traj.diagnostics[i - 1].iterations if i > 0 else 0
        stream.write(f"{i} {float(t[i])!r} {float(dW)!r} {iters}\n")
        write_function(traj.state(i), stream)
