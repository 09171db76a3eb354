"""Lattice region graph, its degree normalization and the temporal shift graph."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datapipe import GridSpec


class GraphConfigError(ValueError):
    pass


def normalize_adjacency(A) -> np.ndarray:
    """D^-1/2 A D^-1/2 with row-sum degrees; isolated nodes get zero rows."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise GraphConfigError(f"adjacency must be square, got {A.shape}")
    if (A < 0).any():
        raise GraphConfigError("adjacency must be non-negative")
    deg = A.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


@dataclass(frozen=True)
class RegionGraph:
    A: np.ndarray
    A_norm: np.ndarray

    @property
    def R(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class ShiftGraph:
    gamma: np.ndarray
    gamma_norm: np.ndarray


def lattice_adjacency(rows: int, cols: int, scale: int = 3) -> np.ndarray:
    if scale < 1 or scale % 2 == 0:
        raise GraphConfigError(f"grid scale must be odd and >= 1, got {scale}")
    reach = scale // 2
    r, c = np.divmod(np.arange(rows * cols), cols)
    dr = np.abs(r[:, None] - r[None, :])
    dc = np.abs(c[:, None] - c[None, :])
    A = ((dr <= reach) & (dc <= reach)).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    return A


def build_region_graph(grid: GridSpec | tuple[int, int], scale: int = 3) -> RegionGraph:
    """Regions are neighbors when they sit inside a common ``scale`` x ``scale`` window."""
    rows, cols = grid.shape if isinstance(grid, GridSpec) else grid
    A = lattice_adjacency(rows, cols, scale)
    return RegionGraph(A, normalize_adjacency(A))


def from_adjacency(A) -> RegionGraph:
    A = np.asarray(A, dtype=np.float64)
    return RegionGraph(A, normalize_adjacency(A))


def build_shift_graph(region_graph: RegionGraph) -> ShiftGraph:
    gamma = np.minimum(region_graph.A + np.eye(region_graph.R), 1.0)
    return ShiftGraph(gamma, normalize_adjacency(gamma))


def dump_adjacency_csv(matrix, path) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "weight"])
        for i, j in zip(*np.nonzero(matrix)):
            w.writerow([int(i), int(j), "%.17g" % matrix[i, j]])
