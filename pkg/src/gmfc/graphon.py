"""Graphons on a uniform midpoint label grid.

Kernels are either step graphons (constant on the cells of an ``R x R``
partition) or grid-sampled kernels (values at cell midpoints, optionally
backed by an analytic function that is re-sampled on finer label grids).
Cells follow the convention ``I_1 = [0, 1/R]``, ``I_i = ((i-1)/R, i/R]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import AsymmetricMatrix, DegenerateDegree, NegativeEntry

DEGREE_FLOOR = 1e-10


def cell_index(u, resolution: int) -> np.ndarray:
    """Index of the cell containing each label in ``u`` (0-based)."""
    u = np.asarray(u, dtype=float)
    idx = np.ceil(u * resolution).astype(np.int64) - 1
    return np.clip(idx, 0, resolution - 1)


@dataclass(frozen=True)
class LabelGrid:
    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("label grid needs at least one cell")

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.M) + 0.5) / self.M

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)

    def cell_of(self, u) -> np.ndarray:
        return cell_index(u, self.M)


@dataclass(frozen=True, eq=False)
class Graphon:
    kind: str
    values: np.ndarray
    func: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("step", "grid"):
            raise ValueError(f"unknown graphon kind {self.kind!r}")
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise ValueError("graphon values must be a square matrix")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def bound(self) -> float:
        return float(self.values.max())

    def __call__(self, u, v) -> np.ndarray:
        if self.func is not None:
            return np.asarray(self.func(np.asarray(u, float), np.asarray(v, float)), dtype=float)
        return self.values[cell_index(u, self.resolution), cell_index(v, self.resolution)]

    def on_grid(self, grid: LabelGrid) -> np.ndarray:
        u = grid.midpoints
        return self(u[:, None], u[None, :]) * np.ones((grid.M, grid.M))

    @classmethod
    def constant(cls, c: float) -> "Graphon":
        return cls("step", np.array([[float(c)]]))

    @classmethod
    def from_function(cls, func: Callable, resolution: int = 64) -> "Graphon":
        """Grid-sampled graphon for an analytic kernel ``func(u, v)``."""
        u = (np.arange(resolution) + 0.5) / resolution
        values = np.asarray(func(u[:, None], u[None, :]), dtype=float) * np.ones((resolution, resolution))
        _check_kernel(values)
        return cls("grid", values, func)

    def to_json(self) -> dict:
        if self.kind == "step":
            return {"kind": "step", "matrix": self.values.tolist()}
        return {"kind": "grid", "resolution": self.resolution, "values": self.values.tolist()}


def _check_kernel(values: np.ndarray) -> None:
    if np.any(values < 0):
        i, j = np.argwhere(values < 0)[0]
        raise NegativeEntry(f"negative entry {values[i, j]} at ({i}, {j})")
    scale = max(1.0, float(np.abs(values).max()))
    if not np.allclose(values, values.T, rtol=0.0, atol=1e-12 * scale):
        raise AsymmetricMatrix("interaction kernel is not symmetric")


def step_graphon_from_matrix(zeta) -> Graphon:
    zeta = np.asarray(zeta, dtype=float)
    if zeta.ndim != 2 or zeta.shape[0] != zeta.shape[1]:
        raise ValueError("zeta must be square")
    _check_kernel(zeta)
    return Graphon("step", zeta.copy())


def load_graphon(source) -> Graphon:
    """Build a graphon from a JSON dict or a path to a JSON file."""
    data = source
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    kind = data.get("kind")
    if kind == "step":
        return step_graphon_from_matrix(data["matrix"])
    if kind == "grid":
        values = np.asarray(data["values"], dtype=float)
        if values.shape != (data["resolution"], data["resolution"]):
            raise ValueError("grid graphon values do not match the declared resolution")
        _check_kernel(values)
        return Graphon("grid", values)
    raise ValueError(f"unknown graphon kind {kind!r}")


@dataclass(frozen=True, eq=False)
class NormalizedGraphon:
    base: Graphon
    grid: LabelGrid
    degrees: np.ndarray
    rows: np.ndarray

    def on_grid(self, grid: LabelGrid) -> np.ndarray:
        if grid.M != self.grid.M:
            raise ValueError("normalized graphon is only available on its own grid")
        return self.rows

    @property
    def weight_matrix(self) -> np.ndarray:
        """``W[i, j] = G~(u_i, u_j) / M``; row ``i`` is the neighbourhood mixture of label ``i``."""
        return self.rows / self.grid.M


def degrees(g, grid: LabelGrid) -> np.ndarray:
    return g.on_grid(grid).mean(axis=1)


def normalize(g: Graphon, grid: LabelGrid, floor: float = DEGREE_FLOOR) -> NormalizedGraphon:
    values = g.on_grid(grid)
    deg = values.mean(axis=1)
    bad = np.flatnonzero(deg <= floor)
    if bad.size:
        raise DegenerateDegree(int(bad[0]), float(deg[bad[0]]), floor)
    rows = values / deg[:, None]
    rows.setflags(write=False)
    deg.setflags(write=False)
    return NormalizedGraphon(g, grid, deg, rows)


def min_degree_bound(g, grid: LabelGrid, floor: float = DEGREE_FLOOR) -> float:
    deg = g.on_grid(grid).mean(axis=1)
    if np.any(deg <= floor):
        return float("inf")
    return float(np.max(1.0 / deg))


def l1_distance(g, h, grid: LabelGrid) -> float:
    return float(np.abs(g.on_grid(grid) - h.on_grid(grid)).mean())


def neighborhood_weights(ng: NormalizedGraphon, label_index: int) -> np.ndarray:
    if not 0 <= label_index < ng.grid.M:
        raise IndexError(f"label index {label_index} outside grid of size {ng.grid.M}")
    return ng.rows[label_index] / ng.grid.M


def mix_graphons(g: Graphon, h: Graphon, s: float) -> Graphon:
    """Convex combination ``(1 - s) g + s h``, evaluated exactly at any label pair."""
    res = int(np.lcm(g.resolution, h.resolution))
    if res > 4096:
        res = max(g.resolution, h.resolution)
    func = lambda u, v: (1.0 - s) * g(u, v) + s * h(u, v)
    u = (np.arange(res) + 0.5) / res
    values = func(u[:, None], u[None, :]) * np.ones((res, res))
    kind = "step" if g.kind == h.kind == "step" else "grid"
    return Graphon(kind, values, func)
