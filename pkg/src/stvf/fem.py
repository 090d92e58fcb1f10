"""P1 finite elements with homogeneous Dirichlet conditions.

Boundary vertices are eliminated: a :class:`FeFunction` stores one value per
interior vertex and is implicitly zero on the boundary. All matrices built on
a space share one CSR sparsity pattern, so linear combinations of them can be
formed on the ``data`` arrays directly.

The regularized total variation density ``sqrt(|G|^2 + eps^2)`` has a piecewise
constant integrand for P1 fields, so every gradient term below is integrated
exactly by a one-point rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, MeshError, ancestors

__all__ = [
    "EPS_MIN",
    "FeSpace",
    "FeFunction",
    "SolverError",
    "assemble_mass",
    "assemble_stiffness",
    "l2_project",
    "prolong",
    "prolongation_matrix",
    "tv_residual",
    "tv_jacobian",
    "tv_sum",
    "apply_Adelta",
    "solve_spd",
    "l2_error",
    "h1_seminorm_error",
    "reference_quadrature",
    "write_function",
    "read_function",
]

# below this (|G|^2 + eps^2)^(-3/2) overflows for small gradients
EPS_MIN = 1e-12


class SolverError(RuntimeError):
    """A linear solve that did not reach its tolerance."""

    def __init__(self, message, residual=np.nan):
        super().__init__(message)
        self.residual = residual


def reference_quadrature(dim: int, order: int):
    """Gauss rule on the reference simplex.

    ``order`` is the number of Gauss-Legendre points per direction; in 2D the
    square rule is collapsed onto the triangle (Duffy map). Returns barycentric
    coordinates ``(q, dim + 1)`` and weights summing to 1.
    """
    if int(order) != order or order < 1:
        raise ValueError(f"quadrature order must be a positive integer, got {order}")
    x, w = np.polynomial.legendre.leggauss(int(order))
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    if dim == 1:
        return np.column_stack([1.0 - x, x]), w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    xi = u.ravel()
    eta = (v * (1.0 - u)).ravel()
    weights = (wu * wv * (1.0 - u)).ravel() * 2.0
    return np.column_stack([1.0 - xi - eta, xi, eta]), weights


class FeSpace:
    """Continuous P1 functions on ``mesh`` vanishing on the boundary."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.interior_dofs = mesh.interior_vertices
        self.interior_dofs.setflags(write=False)
        self.n_dofs = len(self.interior_dofs)
        if self.n_dofs == 0:
            raise MeshError("mesh has no interior vertex")
        dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
        dof[self.interior_dofs] = np.arange(self.n_dofs)
        self.dof_of_vertex = dof
        self.measures = mesh.cell_measures
        p = mesh.vertices[mesh.cells]
        B = p[:, 1:] - p[:, :1]
        g = np.empty_like(p)
        g[:, 1:] = np.linalg.inv(B).transpose(0, 2, 1)
        g[:, 0] = -g[:, 1:].sum(axis=1)
        # gradient of vertex k's hat on cell c is g[c, k]
        self.basis_gradients = g
        self.cell_dofs = dof[mesh.cells]
        for a in (self.dof_of_vertex, self.basis_gradients, self.cell_dofs):
            a.setflags(write=False)

    def __repr__(self):
        return f"FeSpace(dim={self.mesh.dim}, level={self.mesh.level}, n_dofs={self.n_dofs})"

    @property
    def dim(self) -> int:
        return self.mesh.dim

    # -- assembly plumbing ---------------------------------------------------

    def _pattern(self, full: bool):
        cells = self.mesh.cells if full else self.cell_dofs
        k = cells.shape[1]
        rows = np.repeat(cells, k, axis=1).ravel()
        cols = np.tile(cells, (1, k)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        n = self.mesh.n_vertices if full else self.n_dofs
        key = rows[keep] * n + cols[keep]
        ukey, scatter = np.unique(key, return_inverse=True)
        indptr = np.searchsorted(ukey // n, np.arange(n + 1))
        return keep, scatter.reshape(-1), ukey % n, indptr, n

    @cached_property
    def _reduced(self):
        return self._pattern(full=False)

    @cached_property
    def _full(self):
        return self._pattern(full=True)

    def assemble_matrix(self, local: np.ndarray, full: bool = False) -> sp.csr_matrix:
        """Sum per-cell matrices ``local`` of shape ``(n_cells, k, k)``.

        Accumulation order is fixed by the cell order, so results are
        bitwise reproducible.
        """
        keep, scatter, indices, indptr, n = self._full if full else self._reduced
        data = np.bincount(scatter, weights=local.reshape(-1)[keep], minlength=len(indices))
        return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(n, n))

    def assemble_vector(self, local: np.ndarray, full: bool = False) -> np.ndarray:
        """Sum per-cell vectors ``local`` of shape ``(n_cells, k)``."""
        if full:
            return np.bincount(
                self.mesh.cells.ravel(), weights=local.ravel(), minlength=self.mesh.n_vertices
            )
        v = np.bincount(
            self.mesh.cells.ravel(), weights=local.ravel(), minlength=self.mesh.n_vertices
        )
        return v[self.interior_dofs]

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return assemble_stiffness(self)

    # -- helpers ------------------------------------------------------------

    def zeros(self) -> FeFunction:
        return FeFunction(self, np.zeros(self.n_dofs))

    def function(self, coeffs) -> FeFunction:
        return FeFunction(self, coeffs)

    def nodal_values(self, coeffs) -> np.ndarray:
        full = np.zeros(self.mesh.n_vertices)
        full[self.interior_dofs] = coeffs
        return full

    def cell_gradients(self, coeffs) -> np.ndarray:
        """Constant gradient of the P1 field on each cell, shape ``(n_cells, dim)``."""
        vals = self.nodal_values(coeffs)[self.mesh.cells]
        return np.einsum("ck,ckd->cd", vals, self.basis_gradients)

    def quadrature_points(self, order: int):
        """Physical quadrature points ``(n_cells, q, dim)``, barycentrics and weights."""
        lam, w = reference_quadrature(self.dim, order)
        p = self.mesh.vertices[self.mesh.cells]
        return np.einsum("qk,ckd->cqd", lam, p), lam, w


@dataclass(frozen=True, eq=False)
class FeFunction:
    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.space.n_dofs,):
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("FeFunction coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def nodal_values(self) -> np.ndarray:
        return self.space.nodal_values(self.coeffs)

    def cell_gradients(self) -> np.ndarray:
        return self.space.cell_gradients(self.coeffs)

    def l2_norm(self) -> float:
        return float(np.sqrt(self.coeffs @ (self.space.mass @ self.coeffs)))

    def h1_seminorm(self) -> float:
        return float(np.sqrt(self.coeffs @ (self.space.stiffness @ self.coeffs)))

    def _check(self, other):
        if other.space is not self.space:
            raise ValueError("FeFunctions live on different spaces")

    def __add__(self, other):
        self._check(other)
        return FeFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return FeFunction(self.space, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return FeFunction(self.space, float(scalar) * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self):
        return FeFunction(self.space, -self.coeffs)


def _coeffs(space: FeSpace, u) -> np.ndarray:
    if isinstance(u, FeFunction):
        if u.space is not space:
            raise ValueError("FeFunction does not belong to this space")
        return u.coeffs
    u = np.asarray(u, dtype=float)
    if u.shape != (space.n_dofs,):
        raise ValueError(f"expected {space.n_dofs} coefficients, got shape {u.shape}")
    return u


def _check_eps(eps):
    if not eps >= EPS_MIN:
        raise ValueError(f"eps must be >= {EPS_MIN:g}, got {eps}")


def assemble_mass(space: FeSpace, full: bool = False) -> sp.csr_matrix:
    d = space.dim
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return space.assemble_matrix(space.measures[:, None, None] * ref, full=full)


def assemble_stiffness(space: FeSpace, full: bool = False) -> sp.csr_matrix:
    g = space.basis_gradients
    local = space.measures[:, None, None] * np.einsum("cid,cjd->cij", g, g)
    return space.assemble_matrix(local, full=full)


def l2_project(space: FeSpace, f, quad_order: int = 4, rel_tol: float = 1e-12) -> FeFunction:
    """Orthogonal L2 projection onto the space.

    ``f`` is either a callable mapping points ``(k, dim)`` to values ``(k,)``
    or an FeFunction of this space.
    """
    if isinstance(f, FeFunction):
        b = space.mass @ _coeffs(space, f)
    else:
        x, lam, w = space.quadrature_points(quad_order)
        vals = np.asarray(f(x.reshape(-1, space.dim)), dtype=float).reshape(x.shape[:2])
        local = space.measures[:, None] * np.einsum("cq,q,qk->ck", vals, w, lam)
        b = space.assemble_vector(local)
    return FeFunction(space, solve_spd(space.mass, b, rel_tol))


def prolong(u: FeFunction, fine_space: FeSpace) -> FeFunction:
    """Exact representation of a coarse P1 function on a descendant mesh."""
    chain = []
    for m in ancestors(fine_space.mesh):
        if m is u.space.mesh:
            break
        chain.append(m)
    else:
        raise MeshError("fine space mesh is not a refinement of the function's mesh")
    vals = u.nodal_values()
    for m in reversed(chain):
        e = m.midpoint_edges
        vals = np.concatenate([vals, 0.5 * (vals[e[:, 0]] + vals[e[:, 1]])])
    return FeFunction(fine_space, vals[fine_space.interior_dofs])


def prolongation_matrix(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    """Sparse matrix mapping coarse coefficients to their exact fine representation."""
    chain = []
    for m in ancestors(fine.mesh):
        if m is coarse.mesh:
            break
        chain.append(m)
    else:
        raise MeshError("fine space mesh is not a refinement of the coarse mesh")
    P = sp.identity(coarse.mesh.n_vertices, format="csr")
    for m in reversed(chain):
        nv = m.parent.n_vertices
        e = m.midpoint_edges
        k = len(e)
        rows = np.concatenate([np.arange(nv), np.repeat(np.arange(nv, nv + k), 2)])
        cols = np.concatenate([np.arange(nv), e.ravel()])
        vals = np.concatenate([np.ones(nv), np.full(2 * k, 0.5)])
        P = sp.csr_matrix((vals, (rows, cols)), shape=(nv + k, nv)) @ P
    return sp.csr_matrix(P[fine.interior_dofs][:, coarse.interior_dofs])


def _tv_terms(space, coeffs, eps):
    G = space.cell_gradients(coeffs)
    s = np.sqrt(np.einsum("cd,cd->c", G, G) + eps * eps)
    return G, s


def tv_sum(space: FeSpace, u, eps: float) -> float:
    """``sum_T |T| sqrt(|G_T|^2 + eps^2)``; eps = 0 gives the total variation."""
    G, s = _tv_terms(space, _coeffs(space, u), eps)
    return float(space.measures @ s)


def tv_residual(space: FeSpace, u, eps: float) -> np.ndarray:
    """``(G/sqrt(|G|^2+eps^2), grad phi_j)`` for every interior hat ``phi_j``."""
    _check_eps(eps)
    G, s = _tv_terms(space, _coeffs(space, u), eps)
    flux = G * (space.measures / s)[:, None]
    return space.assemble_vector(np.einsum("cd,ckd->ck", flux, space.basis_gradients))


def tv_jacobian(space: FeSpace, u, eps: float, dual=None) -> sp.csr_matrix:
    """Derivative of :func:`tv_residual`; per cell ``H = s^-1 I - s^-3 G G^T``.

    With ``dual`` (per-cell vectors ``w``, ``|w| <= 1``) the primal-dual
    linearization ``H = s^-1 (I - sym(w G^T) / s)`` is assembled instead. It
    is symmetric positive definite and equals the exact derivative when
    ``w = G / s``.
    """
    _check_eps(eps)
    G, s = _tv_terms(space, _coeffs(space, u), eps)
    g = space.basis_gradients
    gG = np.einsum("ckd,cd->ck", g, G)
    gg = np.einsum("cid,cjd->cij", g, g)
    if dual is None:
        outer = (gG / s[:, None])[:, :, None] * (gG / s[:, None])[:, None, :]
    else:
        gw = np.einsum("ckd,cd->ck", g, np.asarray(dual, dtype=float))
        outer = 0.5 * (gw[:, :, None] * gG[:, None, :] + gG[:, :, None] * gw[:, None, :]) / s[:, None, None]
    local = (space.measures / s)[:, None, None] * (gg - outer)
    return space.assemble_matrix(local)


def apply_Adelta(space: FeSpace, u, params, g_n) -> np.ndarray:
    """Weak form ``delta (grad u, grad v) + (f_eps(grad u), grad v) + lam (u - g_n, v)``.

    ``params`` needs ``eps``, ``delta`` and ``lam`` attributes.
    """
    if params.delta < 0 or params.lam < 0:
        raise ValueError("delta and lambda must be nonnegative")
    c = _coeffs(space, u)
    out = tv_residual(space, c, params.eps)
    if params.delta:
        out = out + params.delta * (space.stiffness @ c)
    if params.lam:
        out = out + params.lam * (space.mass @ (c - _coeffs(space, g_n)))
    return out


def _pcg(A, b, rel_tol, maxiter):
    d = A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = r / d
    p = z.copy()
    rz = r @ z
    bnorm = np.linalg.norm(b)
    for _ in range(maxiter):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rel_tol * bnorm:
            # confirm with the true residual
            r = b - A @ x
            if np.linalg.norm(r) <= rel_tol * bnorm:
                return x, np.linalg.norm(r)
        z = r / d
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, np.linalg.norm(b - A @ x)


DIRECT_MAX_DOFS = 5000


def solve_spd(A, b, rel_tol: float = 1e-12, method: str = "auto") -> np.ndarray:
    """Solve ``A x = b`` for sparse SPD ``A`` with ``||Ax - b|| <= rel_tol ||b||``.

    ``method`` is ``"direct"`` (sparse LU plus iterative refinement), ``"cg"``
    (Jacobi-preconditioned CG, capped at ``10 n`` iterations, falling back to
    the direct solver when ``n <= 5000``) or ``"auto"``, which picks the direct
    solver up to 5000 unknowns and CG above.
    """
    if not 0 < rel_tol <= 1e-6:
        raise ValueError(f"rel_tol must lie in (0, 1e-6], got {rel_tol}")
    b = np.asarray(b, dtype=float)
    n = len(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n)
    if method == "auto":
        method = "direct" if n <= DIRECT_MAX_DOFS else "cg"
    if method == "cg":
        x, res = _pcg(A, b, rel_tol, 10 * n)
        if res <= rel_tol * bnorm:
            return x
        if n > DIRECT_MAX_DOFS:
            raise SolverError(
                f"PCG did not converge in {10 * n} iterations (residual {res:.3e})", res
            )
    elif method != "direct":
        raise ValueError(f"unknown method {method!r}")
    lu = spla.splu(sp.csc_matrix(A))
    x = lu.solve(b)
    for _ in range(4):
        r = b - A @ x
        res = np.linalg.norm(r)
        if res <= rel_tol * bnorm:
            return x
        x = x + lu.solve(r)
    res = np.linalg.norm(b - A @ x)
    if res <= rel_tol * bnorm:
        return x
    raise SolverError(f"direct solve residual {res:.3e} above tolerance", res)


def l2_error(u: FeFunction, f, quad_order: int = 6) -> float:
    """``||f - u||_{L2}`` with ``f`` a callable on points, by per-cell Gauss quadrature."""
    space = u.space
    x, lam, w = space.quadrature_points(quad_order)
    fv = np.asarray(f(x.reshape(-1, space.dim)), dtype=float).reshape(x.shape[:2])
    uv = np.einsum("ck,qk->cq", u.nodal_values()[space.mesh.cells], lam)
    return float(np.sqrt(space.measures @ ((fv - uv) ** 2 @ w)))


def h1_seminorm_error(u: FeFunction, grad_f, quad_order: int = 6) -> float:
    """``||grad f - grad u||_{L2}``; ``grad_f`` maps points ``(k, dim)`` to ``(k, dim)``."""
    space = u.space
    x, _, w = space.quadrature_points(quad_order)
    gf = np.asarray(grad_f(x.reshape(-1, space.dim)), dtype=float).reshape(x.shape)
    diff = gf - u.cell_gradients()[:, None, :]
    return float(np.sqrt(space.measures @ (np.einsum("cqd,cqd->cq", diff, diff) @ w)))


def write_function(u: FeFunction, stream) -> None:
    """Dump as ``n_dofs`` then one ``vertex_index value`` line per interior dof."""
    stream.write(f"{u.space.n_dofs}\n")
    for v, c in zip(u.space.interior_dofs, u.coeffs):
        stream.write(f"{int(v)} {float(c)!r}\n")


def read_function(space: FeSpace, stream) -> FeFunction:
    n = int(stream.readline())
    if n != space.n_dofs:
        raise ValueError(f"dump has {n} dofs, space has {space.n_dofs}")
    coeffs = np.zeros(n)
    for _ in range(n):
        v, c = stream.readline().split()
        d = space.dof_of_vertex[int(v)]
        if d < 0:
            raise ValueError(f"vertex {v} is not an interior dof")
        coeffs[d] = float(c)
    return FeFunction(space, coeffs)
