"""Weighted particle clouds, measure flows and Wasserstein-2 distances."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyFlow, WeightSumViolation
from .graphon import LabelGrid

WEIGHT_TOL = 1e-12
SLICED_DIRECTIONS = 64


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("a cloud needs at least one particle")
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise WeightSumViolation("particle weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def probabilities(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def mean(self) -> np.ndarray:
        return self.probabilities() @ self.points

    def shifted(self, c) -> "ParticleCloud":
        return ParticleCloud(self.points + np.asarray(c, float), self.weights)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["weight"] + [f"x{j + 1}" for j in range(self.dim)])
            for w, x in zip(self.probabilities(), self.points):
                writer.writerow([repr(float(w))] + [repr(float(v)) for v in x])

    @classmethod
    def from_csv(cls, path) -> "ParticleCloud":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:], data[:, 0])


@dataclass(frozen=True, eq=False)
class MeasureView:
    """What a coefficient function may know about a measure.

    ``mean`` and ``second_moment`` are ``(d,)`` for a single measure or
    ``(n, d)`` when each evaluation point carries its own measure.
    """

    mean: np.ndarray
    second_moment: np.ndarray
    cloud: Optional[ParticleCloud] = None
    cloud_of: Optional[Callable[[int], ParticleCloud]] = None
    # for batched views: label index of each row, to be passed to ``cloud_of``
    row_labels: Optional[np.ndarray] = None

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.cloud is None:
            raise ValueError("this view carries no particle representation")
        idx = rng.choice(self.cloud.size, size=count, p=self.cloud.probabilities())
        return self.cloud.points[idx]

    @classmethod
    def of_cloud(cls, cloud: ParticleCloud) -> "MeasureView":
        p = cloud.probabilities()
        return cls(p @ cloud.points, p @ cloud.points**2, cloud)

    @classmethod
    def dirac(cls, x) -> "MeasureView":
        x = np.atleast_1d(np.asarray(x, float))
        return cls(x, x**2, ParticleCloud(x[None, :]))


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Per-label, per-time particle clouds with a common particle count.

    ``states`` has shape ``(M, n_times, P, d)``; particle weights are uniform.
    """

    grid: LabelGrid
    times: np.ndarray
    states: np.ndarray
    # optional records of the producing simulation: controls (M, n_times-1, P, k),
    # Brownian increments (M, P, n_times-1, m) and solver diagnostics
    controls: Optional[np.ndarray] = None
    increments: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, float)
        if times.ndim != 1 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("flow times must start at 0 and increase strictly")
        if self.states.ndim != 4 or self.states.shape[:2] != (self.grid.M, times.size):
            raise ValueError("flow states must have shape (M, n_times, P, d)")
        object.__setattr__(self, "times", times)

    @property
    def dim(self) -> int:
        return self.states.shape[3]

    @property
    def particles(self) -> int:
        return self.states.shape[2]

    def cloud(self, label_index: int, t_index: int) -> ParticleCloud:
        return ParticleCloud(self.states[label_index, t_index])

    def label_means(self) -> np.ndarray:
        """Per-label means, shape ``(M, n_times, d)``."""
        return self.states.mean(axis=2)

    def label_second_moments(self) -> np.ndarray:
        return (self.states**2).mean(axis=2)

    def neighborhood_views(self, weight_matrix: np.ndarray, t_index: int) -> list:
        """Exact weighted-mixture views of every label's neighbourhood at one time."""
        means = self.states[:, t_index].mean(axis=1)
        seconds = (self.states[:, t_index] ** 2).mean(axis=1)
        views = []
        for i in range(self.grid.M):
            w = weight_matrix[i]
            views.append(MeasureView(w @ means, w @ seconds,
                                     cloud=_LazyMixture(self, w, t_index)))
        return views

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(self.grid.M):
            sub = directory / f"label_{i}"
            sub.mkdir(exist_ok=True)
            for k in range(self.times.size):
                self.cloud(i, k).to_csv(sub / f"t_{k}.csv")
        manifest = {"M": self.grid.M, "times": self.times.tolist(),
                    "particles": self.particles, "dim": self.dim}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "MeasureFlow":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        M, times = manifest["M"], np.asarray(manifest["times"])
        states = np.empty((M, times.size, manifest["particles"], manifest["dim"]))
        for i in range(M):
            for k in range(times.size):
                states[i, k] = ParticleCloud.from_csv(directory / f"label_{i}" / f"t_{k}.csv").points
        return cls(LabelGrid(M), times, states)


class _LazyMixture:
    """Deferred ``aggregate_neighborhood`` so views stay cheap until a cloud is needed."""

    def __init__(self, flow, weights, t_index):
        self._args = (flow, weights, t_index)
        self._cloud = None

    def _get(self) -> ParticleCloud:
        if self._cloud is None:
            self._cloud = aggregate_neighborhood(*self._args)
        return self._cloud

    def __getattr__(self, name):
        return getattr(self._get(), name)


def aggregate_neighborhood(flow: MeasureFlow, weights, t_index: int) -> ParticleCloud:
    weights = np.asarray(weights, float)
    if flow.states.size == 0:
        raise EmptyFlow("flow has no particles")
    if weights.shape != (flow.grid.M,) or abs(weights.sum() - 1.0) > 1e-10:
        raise WeightSumViolation("neighbourhood weights must have length M and sum to 1")
    keep = np.flatnonzero(weights > 0)
    P = flow.particles
    points = flow.states[keep, t_index].reshape(-1, flow.dim)
    w = np.repeat(weights[keep] / P, P)
    return ParticleCloud(points, w / w.sum())


def sample_representative(flow: MeasureFlow, weights, t_index: int, count: int,
                          rng: np.random.Generator) -> ParticleCloud:
    weights = np.asarray(weights, float)
    if count < 1:
        raise ValueError("count must be positive")
    labels = rng.choice(flow.grid.M, size=count, p=weights / weights.sum())
    particles = rng.integers(0, flow.particles, size=count)
    return ParticleCloud(flow.states[labels, t_index, particles])


def _w2_1d(a: ParticleCloud, b: ParticleCloud) -> float:
    xa, xb = a.points[:, 0], b.points[:, 0]
    oa, ob = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, xb = xa[oa], xb[ob]
    ca, cb = np.cumsum(a.probabilities()[oa]), np.cumsum(b.probabilities()[ob])
    ca[-1] = cb[-1] = 1.0
    levels = np.unique(np.concatenate([[0.0], ca, cb]))
    mids = 0.5 * (levels[1:] + levels[:-1])
    qa = xa[np.minimum(np.searchsorted(ca, mids), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mids), xb.size - 1)]
    return float(np.sqrt(max(np.dot(np.diff(levels), (qa - qb) ** 2), 0.0)))


def wasserstein2(a: ParticleCloud, b: ParticleCloud, directions: int = SLICED_DIRECTIONS,
                 seed: int = 0) -> float:
    """Exact W2 in one dimension; sliced-W2 estimate (seeded projections) otherwise."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"cloud dimensions differ: {a.dim} vs {b.dim}")
    if a.dim == 1:
        return _w2_1d(a, b)
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((directions, a.dim))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    total = 0.0
    for direction in theta:
        pa = ParticleCloud(a.points @ direction, a.weights)
        pb = ParticleCloud(b.points @ direction, b.weights)
        total += _w2_1d(pa, pb) ** 2
    return float(np.sqrt(total / directions))


def moments(a: ParticleCloud, order: float) -> np.ndarray:
    """Weighted coordinate-wise moment ``E[x^order]`` (absolute for non-integer orders)."""
    p = a.probabilities()
    if float(order).is_integer():
        return p @ a.points ** int(order)
    return p @ np.abs(a.points) ** order


def empirical_neighborhood(states, kappa_row) -> ParticleCloud:
    kappa_row = np.asarray(kappa_row, float)
    if abs(kappa_row.sum() - 1.0) > WEIGHT_TOL or np.any(kappa_row < 0):
        raise WeightSumViolation("kappa row must be nonnegative and sum to 1")
    return ParticleCloud(np.asarray(states, float), kappa_row)
