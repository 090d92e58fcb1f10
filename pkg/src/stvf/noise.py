"""Reproducible scalar Wiener paths with exact coarsening.

Increment ``k`` of path ``path_index`` is a pure function of
``(seed, path_index, k)``: the 64-bit word at counter position ``k`` of a
Philox stream keyed by ``(seed, path_index)`` is mapped to a uniform on
(0, 1) and then through the inverse normal CDF. No shared generator state is
involved, so ensembles are identical under any parallel schedule.

Increments are rounded to the dyadic grid ``2**-44``. Partial sums of such
numbers stay exactly representable while ``|W| < 512``, so every block sum
below is exact and independent of summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = ["WienerPath", "sample_path", "coarsen", "write_path", "read_path", "GRID"]

GRID = 2.0**-44
_MASK64 = (1 << 64) - 1


def _normals(seed: int, path_index: int, n: int) -> np.ndarray:
    bitgen = np.random.Philox(key=[int(seed) & _MASK64, int(path_index) & _MASK64])
    raw = bitgen.random_raw(n)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class WienerPath:
    T: float
    n_fine: int
    fine_increments: np.ndarray
    seed: int
    path_index: int
    n_steps: int = 0  # resolution this object presents; 0 means n_fine

    def __post_init__(self):
        if self.n_steps == 0:
            object.__setattr__(self, "n_steps", self.n_fine)
        if self.n_fine % self.n_steps:
            raise ValueError(f"{self.n_steps} does not divide n_fine={self.n_fine}")

    @property
    def increments(self) -> np.ndarray:
        return coarsen(self, self.n_steps)

    @property
    def tau(self) -> float:
        return self.T / self.n_steps

    def view(self, n_steps: int) -> WienerPath:
        """The same Brownian path seen on a coarser time grid."""
        return WienerPath(self.T, self.n_fine, self.fine_increments, self.seed, self.path_index, n_steps)

    def checksum(self) -> float:
        """Exact endpoint ``W(T)``; identical for every coarsening."""
        return math.fsum(self.fine_increments)


def sample_path(seed: int, path_index: int, T: float, n_fine: int) -> WienerPath:
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    if int(n_fine) != n_fine or n_fine < 1:
        raise ValueError(f"n_fine must be a positive integer, got {n_fine}")
    n_fine = int(n_fine)
    inc = np.sqrt(T / n_fine) * _normals(seed, path_index, n_fine)
    inc = np.round(inc / GRID) * GRID
    inc.setflags(write=False)
    return WienerPath(float(T), n_fine, inc, int(seed), int(path_index))


def coarsen(path: WienerPath, n_coarse: int) -> np.ndarray:
    """Block sums of the fine increments onto ``n_coarse`` equal steps."""
    if n_coarse < 1 or path.n_fine % n_coarse:
        raise ValueError(f"n_coarse={n_coarse} does not divide n_fine={path.n_fine}")
    return path.fine_increments.reshape(n_coarse, -1).sum(axis=1)


def write_path(path: WienerPath, stream) -> None:
    stream.write(f"{path.T!r} {path.n_fine} {path.seed} {path.path_index}\n")
    for x in path.fine_increments:
        stream.write(f"{float(x)!r}\n")


def read_path(stream) -> WienerPath:
    T, n, seed, idx = stream.readline().split()
    inc = np.array([float(stream.readline()) for _ in range(int(n))])
    inc.setflags(write=False)
    return WienerPath(float(T), int(n), inc, int(seed), int(idx))
