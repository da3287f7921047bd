"""Finite heterogeneous N-agent system, its cost and decentralized controls."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as streams
from .errors import LabelMismatch, NonFiniteState, ZeroRow
from .graphon import Graphon, LabelGrid
from .measure import MeasureView, aggregate_neighborhood, empirical_neighborhood
from .model import argmin_hamiltonian


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    N: int
    zeta: np.ndarray
    kappa: np.ndarray

    @classmethod
    def from_zeta(cls, zeta) -> "InteractionMatrix":
        zeta = np.asarray(zeta, float)
        if zeta.ndim != 2 or zeta.shape[0] != zeta.shape[1]:
            raise ValueError("interaction matrix must be square")
        if np.any(zeta < 0) or not np.allclose(zeta, zeta.T, atol=1e-12):
            raise ValueError("interaction matrix must be nonnegative and symmetric")
        rows = zeta.sum(axis=1)
        zero = np.flatnonzero(rows <= 0)
        if zero.size:
            raise ZeroRow(int(zero[0]))
        return cls(zeta.shape[0], zeta, zeta / rows[:, None])

    @property
    def labels(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) / self.N

    def step_graphon(self) -> Graphon:
        return Graphon("step", self.zeta)

    @classmethod
    def load(cls, path) -> "InteractionMatrix":
        path = Path(path)
        if path.suffix == ".json":
            data = json.loads(path.read_text())
            return cls.from_zeta(data["zeta"] if isinstance(data, dict) else data)
        return cls.from_zeta(np.loadtxt(path, delimiter=",", ndmin=2))


def sample_interaction_matrix(g: Graphon, N: int, mode: str = "deterministic", rng=0) -> InteractionMatrix:
    """``zeta_ij = g(u_i, u_j)`` at ``u_i = (i - 1/2)/N``, or symmetric Bernoulli draws of it.

    ``rng`` is a seed (counter-based stream) or a ``numpy.random.Generator``.
    """
    u = (np.arange(N) + 0.5) / N
    vals = np.asarray(g(u[:, None], u[None, :]), float) * np.ones((N, N))
    if mode == "deterministic":
        return InteractionMatrix.from_zeta(vals)
    if mode != "bernoulli":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if g.bound > 1.0:
        raise ValueError("bernoulli sampling needs a graphon bounded by 1")
    gen = rng if isinstance(rng, np.random.Generator) else streams.stream(int(rng), streams.BERNOULLI)
    draws = (gen.random((N, N)) < vals).astype(float)
    zeta = np.triu(draws, 1)
    zeta = zeta + zeta.T + np.diag(np.diag(vals))
    return InteractionMatrix.from_zeta(zeta)


@dataclass(eq=False)
class AgentPaths:
    """Repetition-major paths: states ``(R, N, N_t+1, d)``, controls ``(R, N, N_t, k)``."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    increments: np.ndarray
    initials: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        R, N, K1, d = self.states.shape
        if (self.controls.shape[:3] != (R, N, K1 - 1) or self.increments.shape[:3] != (R, N, K1 - 1)
                or self.initials.shape != (R, N, d) or len(self.times) != K1):
            raise ValueError("inconsistent agent path shapes")

    @property
    def repetitions(self) -> int:
        return self.states.shape[0]

    def to_csv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        R, N, K1, d = self.states.shape
        for r in range(R):
            with open(directory / f"paths_rep{r}.csv", "w") as fh:
                fh.write("agent,t," + ",".join(f"x{j + 1}" for j in range(d)) + "\n")
                for i in range(N):
                    for k in range(K1):
                        fh.write(f"{i},{self.times[k]!r}," + ",".join(repr(float(v)) for v in self.states[r, i, k])
                                 + "\n")


# ---------------------------------------------------------------------------
# agent controls: evaluate(k, t, x (R, N, d), view with R*N rows) -> (R, N, k)


class AgentControl:
    def evaluate(self, k, t, x, view):
        raise NotImplementedError


class ZeroAgentControl(AgentControl):
    def __init__(self, k: int = 1):
        self.k = k

    def evaluate(self, k, t, x, view):
        return np.zeros(x.shape[:2] + (self.k,))


class AgentTable(AgentControl):
    """Open-loop control processes ``(R, N, N_t, k)``."""

    def __init__(self, values):
        self.values = np.asarray(values, float)

    def evaluate(self, k, t, x, view):
        return self.values[:, :, k]


class CallableAgentControls(AgentControl):
    """A list of per-agent maps ``fn(t, x (d,), view) -> (k,)``; slow but fully general."""

    def __init__(self, fns):
        self.fns = list(fns)

    def evaluate(self, k, t, x, view):
        R, N, d = x.shape
        out = []
        for r in range(R):
            row = []
            for i in range(N):
                j = r * N + i
                sub = MeasureView(view.mean[j], view.second_moment[j],
                                  cloud=view.cloud_of(j) if view.cloud_of else None)
                row.append(np.atleast_1d(self.fns[i](t, x[r, i], sub)))
            out.append(row)
        return np.asarray(out, float)


class DecentralizedFeedback(AgentControl):
    """Feedback of label ``u_i`` for agent ``i`` with a deterministic limit neighbourhood.

    The neighbourhood of agent ``i`` at step ``k`` is ``sum_j kappa_ij mu^{u_j}_k``,
    where ``mu^{u}`` is the solution flow of the cell containing ``u``.  The
    adjoint is the regression representation of that cell.  The ``view``
    argument of ``evaluate`` is ignored.
    """

    def __init__(self, model, solution, im: InteractionMatrix, cells: np.ndarray, flow=None):
        self.model, self.solution, self.im, self.cells = model, solution, im, cells
        flow = self.flow = flow if flow is not None else solution.flow
        means = flow.label_means()[cells]            # (N, K+1, d)
        seconds = flow.label_second_moments()[cells]
        self.nb_means = np.einsum("ij,jkd->kid", im.kappa, means)
        self.nb_seconds = np.einsum("ij,jkd->kid", im.kappa, seconds)
        M = flow.grid.M
        self.cell_weights = im.kappa @ np.eye(M)[cells]  # (N, M) mixture weights over cells

    def limit_view(self, k, R) -> MeasureView:
        N = self.im.N
        rows = np.tile(np.arange(N), R)
        flow = self.flow
        return MeasureView(self.nb_means[k][rows], self.nb_seconds[k][rows], row_labels=rows,
                           cloud_of=lambda i: aggregate_neighborhood(flow, self.cell_weights[i], k))

    def evaluate(self, k, t, x, view=None):
        R, N, d = x.shape
        adj = self.solution.adjoint
        y = np.empty((R, N, d))
        z = np.empty((R, N, d, adj.Z.shape[-1]))
        for c in np.unique(self.cells):
            sel = self.cells == c
            y[:, sel] = adj.y_at(c, k, x[:, sel])
            z[:, sel] = adj.z_at(c, k, x[:, sel])
        u = np.tile(self.im.labels, R)
        a = argmin_hamiltonian(self.model, u, t, x.reshape(R * N, d), self.limit_view(k, R),
                               y.reshape(R * N, d), z.reshape(R * N, d, -1))
        return np.asarray(a).reshape(R, N, -1)


def decentralized_controls_from_gmfc(solution, im: InteractionMatrix, grid: Optional[LabelGrid] = None,
                                     model=None, flow=None) -> DecentralizedFeedback:
    """Per-agent feedback of the agent's label cell; ``flow`` replaces the solution flow as the
    source of the deterministic limit neighbourhoods."""
    model = model or solution.model
    if model is None:
        raise ValueError("the solution carries no model; pass model=")
    sol_grid = solution.flow.grid
    if grid is not None and grid.M != sol_grid.M:
        raise LabelMismatch(f"solution has {sol_grid.M} label cells, requested grid has {grid.M}")
    if im.N < 1:
        raise LabelMismatch("no agents to cover")
    return DecentralizedFeedback(model, solution, im, sol_grid.cell_of(im.labels), flow)


# ---------------------------------------------------------------------------
# simulation and cost


def agent_noise(seed: int, N: int, repetitions: int, n_steps: int, m: int, dt: float) -> np.ndarray:
    """Brownian increments ``(R, N, N_t, m)`` keyed by (seed, agent, repetition)."""
    out = np.empty((repetitions, N, n_steps, m))
    for i in range(N):
        out[:, i] = streams.brownian_increments(seed, i, np.arange(repetitions), n_steps, m, dt)
    return out


def agent_initials(initial_law, seed: int, N: int, repetitions: int) -> np.ndarray:
    labels = (np.arange(N) + 0.5) / N
    out = np.empty((repetitions, N, initial_law.d))
    for i, u in enumerate(labels):
        out[:, i] = initial_law.sample(seed, i, u, np.arange(repetitions))
    return out


def _empirical_view(x, kappa):
    """Per-(repetition, agent) empirical neighbourhood view with ``R * N`` rows."""
    R, N, d = x.shape
    means = np.einsum("ij,rjd->rid", kappa, x).reshape(R * N, d)
    seconds = np.einsum("ij,rjd->rid", kappa, x * x).reshape(R * N, d)
    return MeasureView(means, seconds, row_labels=np.arange(R * N),
                       cloud_of=lambda j: empirical_neighborhood(x[j // N], kappa[j % N]))


def _step(model, u, t, dt, x, view, a, dw):
    R, N, d = x.shape
    n = R * N
    xf = x.reshape(n, d)
    af = a.reshape(n, -1)
    drift = model.b(u, t, xf, view, af)
    vol = model.sigma(u, t, xf, view, af)
    return (xf + drift * dt + np.einsum("nij,nj->ni", vol, dw.reshape(n, -1))).reshape(R, N, d)


def _check(x, k):
    if not np.all(np.isfinite(x)):
        r, i = np.argwhere(~np.isfinite(x).all(axis=-1))[0]
        raise NonFiniteState(int(i), int(r), k)


def simulate_nagent(model, im: InteractionMatrix, controls, initials, n_steps: int, T: float, seed: int = 0,
                    noise: Optional[np.ndarray] = None, repetitions: Optional[int] = None) -> AgentPaths:
    """Euler-Maruyama for the N-agent system with empirical neighbourhoods ``kappa_i . delta_X``.

    ``initials`` is ``(N, d)`` or ``(R, N, d)``; ``noise`` is ``(R, N, N_t, m)``.
    ``controls`` is an ``AgentControl`` or a list of per-agent callables.
    """
    if not isinstance(controls, AgentControl):
        if len(controls) != im.N:
            raise ValueError(f"need {im.N} agent controls, got {len(controls)}")
        controls = CallableAgentControls(controls)
    x = np.asarray(initials, float)
    if x.ndim == 2:
        x = np.broadcast_to(x, (repetitions or 1,) + x.shape).copy()
    R, N, d = x.shape
    if N != im.N:
        raise ValueError("initial states do not match the number of agents")
    times = np.linspace(0.0, T, n_steps + 1)
    dt = T / n_steps
    if noise is None:
        noise = agent_noise(seed, N, R, n_steps, model.m, dt)
    u = np.tile(im.labels, R)
    states = np.empty((R, N, n_steps + 1, d))
    states[:, :, 0] = x
    ctrl = None
    for k in range(n_steps):
        t = times[k]
        view = _empirical_view(x, im.kappa)
        a = np.asarray(controls.evaluate(k, t, x, view), float).reshape(R, N, -1)
        if ctrl is None:
            ctrl = np.empty((R, N, n_steps, a.shape[-1]))
        ctrl[:, :, k] = a
        x = _step(model, u, t, dt, x, view, a, noise[:, :, k])
        _check(x, k + 1)
        states[:, :, k + 1] = x
    return AgentPaths(times, states, ctrl, noise, states[:, :, 0].copy())


def simulate_limit_agents(model, feedback: DecentralizedFeedback, initials, noise, n_steps: int,
                          T: float) -> AgentPaths:
    """Label-``u_i`` limit processes driven by each agent's own noise, under ``feedback``."""
    x = np.asarray(initials, float).copy()
    R, N, d = x.shape
    times = np.linspace(0.0, T, n_steps + 1)
    dt = T / n_steps
    u = np.tile(feedback.im.labels, R)
    states = np.empty((R, N, n_steps + 1, d))
    states[:, :, 0] = x
    ctrl = None
    for k in range(n_steps):
        view = feedback.limit_view(k, R)
        a = feedback.evaluate(k, times[k], x)
        if ctrl is None:
            ctrl = np.empty((R, N, n_steps, a.shape[-1]))
        ctrl[:, :, k] = a
        x = _step(model, u, times[k], dt, x, view, a, noise[:, :, k])
        _check(x, k + 1)
        states[:, :, k + 1] = x
    return AgentPaths(times, states, ctrl, np.asarray(noise), states[:, :, 0].copy())


def agent_costs(model, paths: AgentPaths, im: InteractionMatrix, views=None) -> np.ndarray:
    """Per-repetition, per-agent cost ``(R, N)``.

    ``views(k, R)`` overrides the empirical neighbourhood (used for limit paths).
    """
    R, N, K1, d = paths.states.shape
    u = np.tile(im.labels, R)
    total = np.zeros(R * N)
    for k in range(K1 - 1):
        x = paths.states[:, :, k]
        view = views(k, R) if views else _empirical_view(x, im.kappa)
        dt = paths.times[k + 1] - paths.times[k]
        total += dt * model.f(u, paths.times[k], x.reshape(R * N, d), view,
                              paths.controls[:, :, k].reshape(R * N, -1))
    x = paths.states[:, :, -1]
    view = views(K1 - 1, R) if views else _empirical_view(x, im.kappa)
    total += model.g(u, x.reshape(R * N, d), view)
    return total.reshape(R, N)


def cost_nagent(model, paths: AgentPaths, im: InteractionMatrix) -> float:
    """``(1/N) sum_i J_i`` averaged over repetitions."""
    return float(agent_costs(model, paths, im).mean())
