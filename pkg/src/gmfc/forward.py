"""Euler-Maruyama simulation of the controlled graphon system, Picard fixed point and cost."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import rng as streams
from .errors import NonFiniteState, PicardDivergence
from .graphon import LabelGrid, NormalizedGraphon
from .measure import MeasureFlow, MeasureView, ParticleCloud, aggregate_neighborhood, wasserstein2


@dataclass
class SimConfig:
    M: int = 16
    P: int = 2000
    n_steps: int = 100
    T: float = 1.0
    seed: int = 0
    damping: float = 1.0
    picard_tol: float = 1e-8
    picard_max: int = 50
    # backward / outer solver settings
    basis: str = "affine"
    rho: float = 0.5
    outer_tol: float = 1e-5
    outer_max: int = 100
    mc_count: int = 0
    # "joint": regress on phi(X_k) and phi(X_k) dW_k together; "plain": phi(X_k) only
    regression: str = "plain"
    threads: int = 1

    def __post_init__(self):
        for name in ("M", "P", "n_steps", "picard_max", "outer_max", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not (self.T > 0 and 0 < self.damping <= 1 and self.picard_tol > 0 and 0 < self.rho <= 1):
            raise ValueError("need T > 0, 0 < damping <= 1, picard_tol > 0, 0 < rho <= 1")
        if self.regression not in ("joint", "plain"):
            raise ValueError(f"unknown regression scheme {self.regression!r}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def grid(self) -> LabelGrid:
        return LabelGrid(self.M)

    def to_json(self) -> dict:
        # the worker cap never changes results, so it stays out of the artifacts
        out = asdict(self)
        out.pop("threads")
        return out


# ---------------------------------------------------------------------------
# regression bases and controls


def basis_size(name: str, d: int) -> int:
    if name == "affine":
        return 1 + d
    if name == "quadratic":
        return 1 + d + d * (d + 1) // 2
    raise ValueError(f"unknown basis {name!r}")


def features(name: str, x: np.ndarray) -> np.ndarray:
    """Basis functions evaluated at ``x`` of shape ``(..., d)`` -> ``(..., nb)``."""
    cols = [np.ones(x.shape[:-1] + (1,)), x]
    if name == "quadratic":
        d = x.shape[-1]
        iu, ju = np.triu_indices(d)
        cols.append(x[..., iu] * x[..., ju])
    elif name != "affine":
        raise ValueError(f"unknown basis {name!r}")
    return np.concatenate(cols, axis=-1)


class ControlProfile:
    """A control evaluated on whole label clouds.

    ``evaluate(k, t, labels, x, view)`` receives the step index, the time, the
    label indices ``(L,)``, states ``(L, P, d)`` and a batched neighbourhood view
    with ``L * P`` rows; it returns controls of shape ``(L, P, k)``.
    """

    kind = "feedback"

    def evaluate(self, k, t, labels, x, view):
        raise NotImplementedError


class ZeroControl(ControlProfile):
    def __init__(self, k: int = 1):
        self.k = k

    def evaluate(self, k, t, labels, x, view):
        return np.zeros(x.shape[:2] + (self.k,))


class FunctionControl(ControlProfile):
    """Feedback ``fn(u, t, x) -> (n, k)`` that ignores the measure."""

    def __init__(self, fn, grid: LabelGrid):
        self.fn, self.grid = fn, grid

    def evaluate(self, k, t, labels, x, view):
        L, P, d = x.shape
        u = np.repeat(self.grid.midpoints[labels], P)
        return np.asarray(self.fn(u, t, x.reshape(L * P, d))).reshape(L, P, -1)


class BasisFeedback(ControlProfile):
    """``alpha = phi(x) @ coefs[label, step]`` with coefficients ``(M, N_t, nb, k)``."""

    def __init__(self, basis: str, coefs: np.ndarray):
        self.basis = basis
        self.coefs = np.asarray(coefs, float)

    def evaluate(self, k, t, labels, x, view):
        return np.einsum("lpb,lbk->lpk", features(self.basis, x), self.coefs[labels, k])

    @classmethod
    def affine(cls, M, n_steps, offset, gain, d=1, k=1) -> "BasisFeedback":
        """Label- and time-constant ``alpha = offset + gain @ x``."""
        coefs = np.zeros((M, n_steps, 1 + d, k))
        coefs[:, :, 0, :] = offset
        coefs[:, :, 1:, :] = np.asarray(gain, float).reshape(k, d).T
        return cls("affine", coefs)

    def gains(self) -> np.ndarray:
        """Affine part ``(M, N_t, d, k)``."""
        return self.coefs[:, :, 1:1 + self._d(), :]

    def _d(self):
        nb = self.coefs.shape[2]
        if self.basis == "affine":
            return nb - 1
        return int((-3 + np.sqrt(9 + 8 * (nb - 1))) // 2)


class TableControl(ControlProfile):
    """Open-loop values ``(M, N_t, P, k)`` attached to particle indices."""

    kind = "open-loop-table"

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, float)

    def evaluate(self, k, t, labels, x, view):
        if self.values.shape[2] != x.shape[1]:
            raise ValueError("table control does not match the particle layout")
        return self.values[labels, k]


class PerturbedControl(ControlProfile):
    """``base + eps * direction``."""

    def __init__(self, base: ControlProfile, direction: ControlProfile, eps: float):
        self.base, self.direction, self.eps = base, direction, eps

    def evaluate(self, k, t, labels, x, view):
        out = self.base.evaluate(k, t, labels, x, view)
        if self.eps == 0.0:
            return out
        return out + self.eps * self.direction.evaluate(k, t, labels, x, view)


# ---------------------------------------------------------------------------
# simulation inputs


@dataclass(eq=False)
class SimInputs:
    """Initial particles ``(M, P, d)`` and Brownian increments ``(M, P, N_t, m)``."""

    x0: np.ndarray
    dW: np.ndarray
    coupling: str = "independent"


def draw_inputs(model, config: SimConfig, initial_law=None, coupling: str = "independent",
                seed: Optional[int] = None) -> SimInputs:
    """Counter-based initial states and noise.

    ``independent``: streams keyed by (label, particle).  ``canonical``: one
    noise stream per particle shared by all labels, and initial states obtained
    by the label's quantile transform of a shared uniform per particle.
    ``antithetic``: independent streams for the first half of the particles,
    mirrored in the second half (initial states reflected about the label mean,
    increments negated); needs an even ``P`` and a symmetric initial law.
    """
    if coupling == "antithetic":
        if config.P % 2:
            raise ValueError("antithetic inputs need an even particle count")
        half = draw_inputs(model, SimConfig(**{**config.to_json(), "P": config.P // 2}), initial_law,
                           "independent", seed)
        centre = (initial_law or model.initial).params(config.grid.midpoints)[0].reshape(config.M, 1, -1)
        return SimInputs(np.concatenate([half.x0, 2 * centre - half.x0], axis=1),
                         np.concatenate([half.dW, -half.dW], axis=1), coupling)
    initial_law = initial_law or model.initial
    seed = config.seed if seed is None else seed
    grid, P = config.grid, np.arange(config.P)
    x0 = np.empty((config.M, config.P, model.d))
    dW = np.empty((config.M, config.P, config.n_steps, model.m))
    if coupling == "independent":
        for i, u in enumerate(grid.midpoints):
            x0[i] = initial_law.sample(seed, i, u, P)
            dW[i] = streams.brownian_increments(seed, i, P, config.n_steps, model.m, config.dt)
    elif coupling == "canonical":
        levels = streams.uniforms(seed, streams.CANONICAL, 0, P, (model.d,))
        shared = streams.brownian_increments(seed, 0, P, config.n_steps, model.m, config.dt)
        for i, u in enumerate(grid.midpoints):
            x0[i] = initial_law.quantile(u, levels)
            dW[i] = shared
    else:
        raise ValueError(f"unknown coupling {coupling!r}")
    return SimInputs(x0, dW, coupling)


# ---------------------------------------------------------------------------
# simulation


def _neighborhood_moments(flow: MeasureFlow, W: np.ndarray):
    """Neighbourhood means and second moments, each ``(n_times, M, d)``."""
    means = np.einsum("ij,jkd->kid", W, flow.label_means())
    seconds = np.einsum("ij,jkd->kid", W, flow.label_second_moments())
    return means, seconds


def batched_view(flow: MeasureFlow, W, nb_means, nb_seconds, k, labels, P) -> MeasureView:
    rows = np.repeat(labels, P)
    return MeasureView(nb_means[k][rows], nb_seconds[k][rows],
                       cloud_of=lambda i: aggregate_neighborhood(flow, W[i], k), row_labels=rows)


def _simulate(model, control, frozen: MeasureFlow, W, labels, x0, dW, times):
    labels = np.asarray(labels)
    L, P, d = x0.shape
    n_steps = len(times) - 1
    u = np.repeat(frozen.grid.midpoints[labels], P)
    nb_means, nb_seconds = _neighborhood_moments(frozen, W)
    states = np.empty((L, n_steps + 1, P, d))
    ctrl = None
    states[:, 0] = x0
    x = x0.reshape(L * P, d).copy()
    for k in range(n_steps):
        t = times[k]
        dt = times[k + 1] - t
        view = batched_view(frozen, W, nb_means, nb_seconds, k, labels, P)
        a = control.evaluate(k, t, labels, x.reshape(L, P, d), view)
        if ctrl is None:
            ctrl = np.empty((L, n_steps, P, a.shape[-1]))
        ctrl[:, k] = a
        a = a.reshape(L * P, -1)
        drift = model.b(u, t, x, view, a)
        vol = model.sigma(u, t, x, view, a)
        dw = dW[:, :, k, :].reshape(L * P, -1)
        x = x + drift * dt + np.einsum("nij,nj->ni", vol, dw)
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            raise NonFiniteState(int(labels[bad // P]), bad % P, k + 1)
        states[:, k + 1] = x.reshape(L, P, d)
    return states, ctrl


def simulate_label(model, control, frozen_flow: MeasureFlow, ng: NormalizedGraphon, label_index: int,
                   config: SimConfig, inputs: SimInputs) -> np.ndarray:
    """Euler-Maruyama path of one label's particles against a frozen flow, ``(N_t+1, P, d)``."""
    states, _ = _simulate(model, control, frozen_flow, ng.weight_matrix, [label_index],
                          inputs.x0[label_index:label_index + 1],
                          inputs.dW[label_index:label_index + 1], config.times)
    return states[0]


def constant_flow(grid: LabelGrid, times, x0) -> MeasureFlow:
    states = np.repeat(x0[:, None], len(times), axis=1)
    return MeasureFlow(grid, times, states)


def _terminal_residual(a: np.ndarray, b: np.ndarray) -> float:
    return max(wasserstein2(ParticleCloud(a[i, -1]), ParticleCloud(b[i, -1])) for i in range(a.shape[0]))


def _damp(new: np.ndarray, old: np.ndarray, theta: float) -> np.ndarray:
    """Affine per-(label, time) transport of ``new`` matching blended mean and variance."""
    m_new, m_old = new.mean(axis=2, keepdims=True), old.mean(axis=2, keepdims=True)
    v_new, v_old = new.var(axis=2, keepdims=True), old.var(axis=2, keepdims=True)
    m = theta * m_new + (1 - theta) * m_old
    v = theta * v_new + (1 - theta) * v_old
    scale = np.sqrt(np.divide(v, v_new, out=np.ones_like(v), where=v_new > 0))
    return m + scale * (new - m_new)


def picard_fixed_point(model, control, ng: NormalizedGraphon, config: SimConfig,
                       initial_law=None, inputs: Optional[SimInputs] = None,
                       start: Optional[MeasureFlow] = None) -> MeasureFlow:
    """Frozen-flow Picard iteration with common random numbers across iterations."""
    inputs = inputs or draw_inputs(model, config, initial_law)
    grid, times, W = config.grid, config.times, ng.weight_matrix
    labels = np.arange(grid.M)
    prev = start or constant_flow(grid, times, inputs.x0)
    history = []
    for it in range(1, config.picard_max + 1):
        states, ctrl = _simulate(model, control, prev, W, labels, inputs.x0, inputs.dW, times)
        if config.damping < 1.0:
            states = _damp(states, prev.states, config.damping)
        res = _terminal_residual(states, prev.states)
        history.append(res)
        flow = MeasureFlow(grid, times, states, controls=ctrl, increments=inputs.dW,
                           info={"picard_iterations": it, "picard_history": list(history)})
        if res <= config.picard_tol:
            return flow
        prev = flow
    raise PicardDivergence(history)


# ---------------------------------------------------------------------------
# cost


@dataclass
class CostEstimate:
    value: float
    stderr: float
    per_label: np.ndarray = field(repr=False)
    per_label_se: np.ndarray = field(repr=False)
    per_particle: np.ndarray = field(repr=False)


def particle_costs(model, flow: MeasureFlow, ng: NormalizedGraphon, controls=None) -> np.ndarray:
    """Left-Riemann running cost plus terminal cost per particle, ``(M, P)``."""
    controls = flow.controls if controls is None else controls
    W = ng.weight_matrix
    M, K1, P, d = flow.states.shape
    labels = np.arange(M)
    u = np.repeat(flow.grid.midpoints, P)
    nb_means, nb_seconds = _neighborhood_moments(flow, W)
    total = np.zeros(M * P)
    for k in range(K1 - 1):
        t, dt = flow.times[k], flow.times[k + 1] - flow.times[k]
        view = batched_view(flow, W, nb_means, nb_seconds, k, labels, P)
        total += dt * model.f(u, t, flow.states[:, k].reshape(M * P, d), view,
                              controls[:, k].reshape(M * P, -1))
    view = batched_view(flow, W, nb_means, nb_seconds, K1 - 1, labels, P)
    total += model.g(u, flow.states[:, -1].reshape(M * P, d), view)
    return total.reshape(M, P)


def summarize_costs(per_particle: np.ndarray) -> CostEstimate:
    M, P = per_particle.shape
    per_label = per_particle.mean(axis=1)
    se = per_particle.std(axis=1, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(M)
    return CostEstimate(float(per_label.mean()), float(np.sqrt(np.sum(se**2)) / M),
                        per_label, se, per_particle)


def cost(model, control, flow: MeasureFlow, ng: NormalizedGraphon, config: SimConfig) -> CostEstimate:
    """Cost of ``control`` along ``flow``; uses the controls recorded in the flow if present."""
    controls = flow.controls
    if controls is None:
        W = ng.weight_matrix
        nb_means, nb_seconds = _neighborhood_moments(flow, W)
        labels = np.arange(flow.grid.M)
        controls = np.stack([control.evaluate(k, flow.times[k], labels, flow.states[:, k],
                                              batched_view(flow, W, nb_means, nb_seconds, k, labels,
                                                           flow.particles))
                             for k in range(len(flow.times) - 1)], axis=1)
    return summarize_costs(particle_costs(model, flow, ng, controls))
