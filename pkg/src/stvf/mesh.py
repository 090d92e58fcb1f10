"""Simplicial meshes of intervals and convex polygons with nested refinement.

Meshes are immutable. ``refine`` returns a child mesh which keeps a reference
to its parent together with the data needed to prolong P1 functions exactly:
the child's first ``n_vertices(parent)`` vertices coincide with the parent's,
and each further vertex is the midpoint of a recorded parent edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Domain",
    "Mesh",
    "MeshError",
    "uniform_interval_mesh",
    "structured_triangle_mesh",
    "refine",
    "read_mesh",
    "write_mesh",
    "ancestors",
]


class MeshError(ValueError):
    """Invalid domain, mesh, or mesh lineage."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Domain:
    """A 1D interval or a convex 2D polygon.

    For ``dim == 1`` ``vertices`` holds the two endpoints ``[[a], [b]]``;
    for ``dim == 2`` the polygon corners in order.
    """

    dim: int
    vertices: tuple

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise MeshError(f"domain dimension must be 1 or 2, got {self.dim}")
        v = np.asarray(self.vertices, dtype=float)
        if self.dim == 1:
            if v.shape != (2, 1) or not v[0, 0] < v[1, 0]:
                raise MeshError("interval domain needs endpoints a < b")
            return
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise MeshError("polygon domain needs at least 3 vertices in the plane")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
        if not (np.all(cross > 0) or np.all(cross < 0)):
            raise MeshError("polygon domain must be strictly convex")
        if self.measure <= 0:
            raise MeshError("polygon domain is degenerate")

    @classmethod
    def interval(cls, a: float, b: float) -> Domain:
        return cls(1, ((float(a),), (float(b),)))

    @classmethod
    def rectangle(cls, x0: float, x1: float, y0: float, y1: float) -> Domain:
        return cls(2, ((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    @classmethod
    def unit_square(cls) -> Domain:
        return cls.rectangle(0.0, 1.0, 0.0, 1.0)

    @property
    def measure(self) -> float:
        v = np.asarray(self.vertices, dtype=float)
        if self.dim == 1:
            return float(v[1, 0] - v[0, 0])
        x, y = v[:, 0], v[:, 1]
        return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def rectangle_bounds(self):
        """``(x0, x1, y0, y1)`` if the domain is an axis-aligned rectangle, else None."""
        if self.dim != 2 or len(self.vertices) != 4:
            return None
        v = np.asarray(self.vertices, dtype=float)
        xs, ys = np.unique(v[:, 0]), np.unique(v[:, 1])
        if len(xs) != 2 or len(ys) != 2:
            return None
        corners = {(x, y) for x in xs for y in ys}
        if {tuple(p) for p in v} != corners:
            return None
        return float(xs[0]), float(xs[1]), float(ys[0]), float(ys[1])


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    level: int = 0
    parent: Mesh | None = None
    kappa: float = field(default=np.nan)
    # refinement lineage (None on root meshes)
    parent_cell: np.ndarray | None = None
    midpoint_edges: np.ndarray | None = None

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim == 1:
            verts = verts[:, None]
        object.__setattr__(self, "vertices", _frozen(verts, float))
        object.__setattr__(self, "cells", _frozen(self.cells, np.int64))
        object.__setattr__(self, "boundary", _frozen(self.boundary, bool))
        if self.parent_cell is not None:
            object.__setattr__(self, "parent_cell", _frozen(self.parent_cell, np.int64))
        if self.midpoint_edges is not None:
            object.__setattr__(
                self, "midpoint_edges", _frozen(self.midpoint_edges, np.int64).reshape(-1, 2)
            )
        dim = self.dim
        if dim not in (1, 2):
            raise MeshError(f"unsupported mesh dimension {dim}")
        if self.cells.ndim != 2 or self.cells.shape[1] != dim + 1:
            raise MeshError(f"cells must have {dim + 1} vertices each")
        if self.cells.min() < 0 or self.cells.max() >= len(self.vertices):
            raise MeshError("cell refers to a nonexistent vertex")
        if self.boundary.shape != (len(self.vertices),):
            raise MeshError("one boundary flag per vertex required")
        if np.any(self.cell_measures <= 0):
            raise MeshError("every cell must have positive measure")
        if np.isnan(self.kappa):
            object.__setattr__(self, "kappa", self.h_max / self.h_min)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def cell_measures(self) -> np.ndarray:
        p = self.vertices[self.cells]
        if self.dim == 1:
            return p[:, 1, 0] - p[:, 0, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def measure(self) -> float:
        return float(self.cell_measures.sum())

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs."""
        return _edges(self.cells)[0]

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    @property
    def h_max(self) -> float:
        return float(self.edge_lengths.max())

    @property
    def h_min(self) -> float:
        return float(self.edge_lengths.min())

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    def barycentric(self, cell: int, points) -> np.ndarray:
        """Barycentric coordinates of ``points`` (shape (k, dim)) w.r.t. a cell."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        p = self.vertices[self.cells[cell]]
        A = (p[1:] - p[0]).T
        lam = np.linalg.solve(A, (pts - p[0]).T).T
        return np.column_stack([1.0 - lam.sum(axis=1), lam])

    def contains(self, cell: int, points, tol: float = 1e-12) -> np.ndarray:
        return np.all(self.barycentric(cell, points) >= -tol, axis=1)


def _edges(cells):
    """Unique sorted edges and, per unique edge, the number of incident cells."""
    k = cells.shape[1]
    pairs = np.concatenate(
        [cells[:, [i, j]] for i in range(k) for j in range(i + 1, k)], axis=0
    )
    pairs.sort(axis=1)
    edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    return edges, inverse.reshape(-1), counts


def uniform_interval_mesh(domain: Domain, n_cells: int) -> Mesh:
    if domain.dim != 1:
        raise MeshError("uniform_interval_mesh needs a 1D domain")
    if int(n_cells) != n_cells or n_cells < 2:
        raise MeshError(f"n_cells must be an integer >= 2 (no interior node otherwise), got {n_cells}")
    n_cells = int(n_cells)
    a, b = domain.vertices[0][0], domain.vertices[1][0]
    x = a + (b - a) * np.arange(n_cells + 1) / n_cells
    x[-1] = b
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    boundary = np.zeros(n_cells + 1, dtype=bool)
    boundary[[0, -1]] = True
    return Mesh(x[:, None], cells, boundary)


def structured_triangle_mesh(domain: Domain, n_x: int, n_y: int) -> Mesh:
    """Rectangle split into ``n_x * n_y`` quads, each cut along its SW-NE diagonal."""
    bounds = domain.rectangle_bounds()
    if bounds is None:
        raise MeshError(
            "structured_triangle_mesh only handles axis-aligned rectangles; for a general "
            "convex polygon supply a coarse mesh file (read_mesh) and refine it"
        )
    if n_x < 2 or n_y < 2:
        raise MeshError(f"n_x and n_y must be >= 2, got {n_x}, {n_y}")
    x0, x1, y0, y1 = bounds
    xs = x0 + (x1 - x0) * np.arange(n_x + 1) / n_x
    ys = y0 + (y1 - y0) * np.arange(n_y + 1) / n_y
    xs[-1], ys[-1] = x1, y1
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n_x + 1) * (n_y + 1)).reshape(n_y + 1, n_x + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    boundary = np.zeros(idx.shape, dtype=bool)
    boundary[[0, -1], :] = True
    boundary[:, [0, -1]] = True
    return Mesh(verts, cells, boundary.ravel())


def refine(mesh: Mesh) -> Mesh:
    """Uniform nested refinement: bisection in 1D, regular quadrisection in 2D."""
    edges, inverse, counts = _edges(mesh.cells)
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    verts = np.concatenate([mesh.vertices, mid])
    if mesh.dim == 1:
        # cells are their own single edge
        m = nv + inverse
        c = mesh.cells
        cells = np.stack([np.column_stack([c[:, 0], m]), np.column_stack([m, c[:, 1]])], axis=1)
        cells = cells.reshape(-1, 2)
        new_boundary = np.zeros(len(edges), dtype=bool)
        n_children = 2
    else:
        nc = mesh.n_cells
        # pair order used by _edges: (0,1), (0,2), (1,2)
        m01 = nv + inverse[:nc]
        m02 = nv + inverse[nc:2 * nc]
        m12 = nv + inverse[2 * nc:]
        a, b, c = mesh.cells.T
        cells = np.stack(
            [
                np.column_stack([a, m01, m02]),
                np.column_stack([m01, b, m12]),
                np.column_stack([m02, m12, c]),
                np.column_stack([m01, m12, m02]),
            ],
            axis=1,
        ).reshape(-1, 3)
        new_boundary = counts == 1
        n_children = 4
    boundary = np.concatenate([mesh.boundary, new_boundary])
    return Mesh(
        verts,
        cells,
        boundary,
        level=mesh.level + 1,
        parent=mesh,
        kappa=mesh.kappa,
        parent_cell=np.repeat(np.arange(mesh.n_cells), n_children),
        midpoint_edges=edges,
    )


def ancestors(mesh: Mesh):
    """Yield ``mesh`` and then its chain of parents, finest first."""
    m = mesh
    while m is not None:
        yield m
        m = m.parent


def read_mesh(path) -> Mesh:
    """Read the whitespace-separated coarse-mesh text format.

    Layout: ``dim n_vertices n_cells``, one vertex per line, one cell per line
    (0-based vertex indices), then one line listing the boundary vertices.
    """
    lines = [ln.split() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    try:
        dim, nv, nc = (int(t) for t in lines[0])
        verts = np.array([[float(t) for t in ln] for ln in lines[1:1 + nv]])
        cells = np.array([[int(t) for t in ln] for ln in lines[1 + nv:1 + nv + nc]])
        bline = lines[1 + nv + nc] if len(lines) > 1 + nv + nc else []
        bidx = np.array([int(t) for t in bline], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from None
    if verts.shape != (nv, dim) or cells.shape != (nc, dim + 1):
        raise MeshError(f"mesh file {path}: header does not match contents")
    boundary = np.zeros(nv, dtype=bool)
    boundary[bidx] = True
    cells = cells.copy()
    if dim == 2:
        # orient counter-clockwise
        p = verts[cells]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        neg = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
        cells[neg] = cells[neg][:, [0, 2, 1]]
    mesh = Mesh(verts, cells, boundary)
    if dim == 2:
        edges, _, counts = _edges(mesh.cells)
        if np.any(counts > 2):
            raise MeshError(f"mesh file {path}: non-conforming, an edge has more than two cells")
        if not np.all(mesh.boundary[edges[counts == 1]]):
            raise MeshError(f"mesh file {path}: boundary edge vertex not flagged as boundary")
    else:
        valence = np.bincount(mesh.cells.ravel(), minlength=nv)
        if np.any(valence > 2):
            raise MeshError(f"mesh file {path}: non-conforming, a vertex has more than two cells")
        if not np.all(mesh.boundary[valence == 1]):
            raise MeshError(f"mesh file {path}: end vertex not flagged as boundary")
    return mesh


def write_mesh(mesh: Mesh, path) -> None:
    out = [f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += [" ".join(str(int(i)) for i in c) for c in mesh.cells]
    out.append(" ".join(str(int(i)) for i in np.flatnonzero(mesh.boundary)))
    Path(path).write_text("\n".join(out) + "\n")
