"""Convergence experiments: propagation of chaos, cost gap, stability and label continuity."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
import numpy as np
from scipy import stats

from .adjoint import FbsdeSolution, solve_pontryagin_fbsde
from .errors import BoundaryCase, NonPositiveError
from .forward import SimConfig, draw_inputs, picard_fixed_point
from .graphon import Graphon, l1_distance, mix_graphons, normalize
from .nagent import (AgentTable, DecentralizedFeedback, agent_costs, agent_initials, agent_noise,
                     decentralized_controls_from_gmfc, sample_interaction_matrix, simulate_limit_agents,
                     simulate_nagent)


def q_rate(N, d: int, kappa_moment: float, allow_boundary: bool = False) -> float:
    """``q_{N,d,kappa}``: empirical-measure W2 rate for ``2 + kappa`` finite moments.

    The excluded parameter pairs raise ``BoundaryCase`` unless ``allow_boundary``,
    in which case the same closed form is evaluated there.
    """
    if N < 1 or d < 1 or kappa_moment <= 0:
        raise ValueError("need N >= 1, d >= 1 and kappa > 0")
    p = 2.0 + kappa_moment
    boundary = p == 4.0 if d <= 4 else p == d / (d - 2.0)
    if boundary and not allow_boundary:
        raise BoundaryCase(f"rate undefined for d = {d}, moment order {p}")
    tail = N ** (-kappa_moment / p)
    if d < 4:
        return float(N ** -0.5 + tail)
    if d == 4:
        return float(N ** -0.5 * np.log(1 + N) + tail)
    return float(N ** (-2.0 / d) + tail)


def fit_loglog(Ns, errors, level: float = 0.95):
    """OLS of ``log error`` on ``log N``: ``(slope, intercept, (lo, hi))``."""
    Ns, errors = np.asarray(Ns, float), np.asarray(errors, float)
    if np.any(errors <= 0):
        raise NonPositiveError("log-log fit needs strictly positive errors")
    x, y = np.log(Ns), np.log(errors)
    n = len(x)
    xc = x - x.mean()
    sxx = np.dot(xc, xc)
    slope = float(np.dot(xc, y - y.mean()) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    if n > 2:
        resid = y - intercept - slope * x
        se = np.sqrt(np.dot(resid, resid) / (n - 2) / sxx)
        half = float(stats.t.ppf(0.5 + level / 2, n - 2) * se)
    else:
        half = float("nan")
    return slope, intercept, (slope - half, slope + half)


def nonincreasing_within(values, stderrs, k: float = 2.0) -> bool:
    """No step increases by more than ``k`` standard errors of the difference."""
    v, s = np.asarray(values, float), np.asarray(stderrs, float)
    return bool(np.all(np.diff(v) <= k * np.sqrt(s[1:] ** 2 + s[:-1] ** 2)))


def decreasing_beyond(values, stderrs, k: float = 2.0) -> bool:
    """Every step decreases by more than ``k`` standard errors of the difference."""
    v, s = np.asarray(values, float), np.asarray(stderrs, float)
    return bool(np.all(-np.diff(v) > k * np.sqrt(s[1:] ** 2 + s[:-1] ** 2)))


@dataclass
class RateReport:
    name: str
    Ns: list
    errors: list
    stderrs: list
    theoretical_rates: list
    fitted_slope: float
    slope_ci: tuple
    seed: int
    repetitions: int
    config: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.Ns) == len(self.errors) == len(self.stderrs) == len(self.theoretical_rates)):
            raise ValueError("rate report columns have different lengths")
        if any(e < 0 for e in self.errors):
            raise ValueError("errors must be nonnegative")

    def to_json(self) -> dict:
        out = asdict(self)
        out["slope_ci"] = list(self.slope_ci)
        return out

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        with open(directory / f"{self.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "error", "stderr", "q_rate"])
            for row in zip(self.Ns, self.errors, self.stderrs, self.theoretical_rates):
                w.writerow([repr(v) for v in row])


def _safe_fit(Ns, errors):
    try:
        return fit_loglog(Ns, errors)
    except NonPositiveError:
        return float("nan"), float("nan"), (float("nan"), float("nan"))


# ---------------------------------------------------------------------------
# N-agent versus limit


def _solve(model, g: Graphon, config: SimConfig, solution=None) -> FbsdeSolution:
    if solution is not None:
        return solution
    return solve_pontryagin_fbsde(model, normalize(g, config.grid), config)


def reference_flow(model, solution: FbsdeSolution, config: SimConfig, particles: int):
    """Forward flow of the solved control on a larger antithetic particle set."""
    cfg = SimConfig(**{**config.to_json(), "P": particles})
    inputs = draw_inputs(model, cfg, coupling="antithetic")
    return picard_fixed_point(model, solution.control, solution.ng, cfg, inputs=inputs)


def coupled_systems(model, g: Graphon, solution: FbsdeSolution, N: int, repetitions: int, config: SimConfig,
                    empirical: bool = False, antithetic: bool = False, flow=None):
    """N-agent and limit paths sharing initials and Brownian drivers agent by agent.

    Both systems use the control processes of the limit paths.  With
    ``empirical`` the N-agent system instead runs the decentralized feedback
    against its own empirical neighbourhoods.  With ``antithetic`` the second
    half of the repetitions mirrors the first (initial states reflected about
    the label mean, increments negated); this needs a symmetric initial law.
    """
    im = sample_interaction_matrix(g, N, "deterministic")
    fb = decentralized_controls_from_gmfc(solution, im, model=model, flow=flow)
    if antithetic:
        if repetitions % 2:
            raise ValueError("antithetic sampling needs an even number of repetitions")
        half = repetitions // 2
        x0 = agent_initials(model.initial, config.seed, N, half)
        dW = agent_noise(config.seed, N, half, config.n_steps, model.m, config.dt)
        centre = model.initial.params(im.labels)[0].reshape(1, N, -1)
        x0 = np.concatenate([x0, 2 * centre - x0])
        dW = np.concatenate([dW, -dW])
    else:
        x0 = agent_initials(model.initial, config.seed, N, repetitions)
        dW = agent_noise(config.seed, N, repetitions, config.n_steps, model.m, config.dt)
    limit = simulate_limit_agents(model, fb, x0, dW, config.n_steps, config.T)
    if empirical:
        controls = _EmpiricalFeedback(fb)
    else:
        controls = AgentTable(limit.controls)
    agents = simulate_nagent(model, im, controls, x0, config.n_steps, config.T, noise=dW)
    return im, fb, agents, limit


class _EmpiricalFeedback:
    def __init__(self, fb: DecentralizedFeedback):
        self.fb = fb

    def evaluate(self, k, t, x, view):
        from .model import argmin_hamiltonian
        R, N, d = x.shape
        adj = self.fb.solution.adjoint
        y = np.empty((R, N, d))
        z = np.empty((R, N, d, adj.Z.shape[-1]))
        for c in np.unique(self.fb.cells):
            sel = self.fb.cells == c
            y[:, sel] = adj.y_at(c, k, x[:, sel])
            z[:, sel] = adj.z_at(c, k, x[:, sel])
        u = np.tile(self.fb.im.labels, R)
        a = argmin_hamiltonian(self.fb.model, u, t, x.reshape(R * N, d), view, y.reshape(R * N, d),
                               z.reshape(R * N, d, -1))
        return np.asarray(a).reshape(R, N, -1)


def _pairing(antithetic):
    if not antithetic:
        return lambda v: v
    return lambda v: 0.5 * (v[: len(v) // 2] + v[len(v) // 2:])


def _se(v) -> float:
    return float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0


def _chaos_error(agents, limit):
    """Per-repetition ``(1/N) sum_i sup_t |X^i - Xbar^i|^2``."""
    diff = np.sum((agents.states - limit.states) ** 2, axis=-1)
    return diff.max(axis=2).mean(axis=1)


def _label_quadrature_gap(solution: FbsdeSolution, labels) -> float:
    """``(1/N) sum_i Jbar(u_i) - J*`` from the per-label limit costs of the solver."""
    per_label = solution.cost.per_label
    if np.ptp(per_label) == 0.0:
        return 0.0
    cells = solution.flow.grid.cell_of(labels)
    return float(per_label[cells].mean() - per_label.mean())


def _label_symmetric(model, g: Graphon) -> bool:
    return bool(model.label_constant() and np.ptp(g.values) == 0.0) if hasattr(model, "label_constant") else False


def convergence_experiments(model, g: Graphon, N_list, repetitions: int, config: SimConfig, solution=None,
                            kappa_moment: float = 8.0, empirical: bool = False, antithetic: bool = True,
                            reference_particles: int = 20000):
    """Propagation-of-chaos and cost-gap reports from one set of coupled runs.

    The limit neighbourhoods come from a forward flow of the solved control on
    ``reference_particles`` antithetic particles per label (0 keeps the solver's
    own flow), which keeps the flow's sampling error below the finite-N effects.
    """
    solution = _solve(model, g, config, solution)
    flow = reference_flow(model, solution, config, reference_particles) if reference_particles else None
    d = model.d
    symmetric = _label_symmetric(model, g)
    poc, poc_se, gap, gap_se, direct, direct_se, qn = [], [], [], [], [], [], []
    for N in N_list:
        im, fb, agents, limit = coupled_systems(model, g, solution, N, repetitions, config, empirical,
                                                antithetic, flow)
        pair = _pairing(antithetic)
        e = pair(_chaos_error(agents, limit))
        poc.append(float(e.mean()))
        poc_se.append(_se(e))
        c_agents = agent_costs(model, agents, im)
        c_limit = agent_costs(model, limit, im, views=fb.limit_view)
        diff = pair((c_agents - c_limit).mean(axis=1))
        q = 0.0 if symmetric else _label_quadrature_gap(solution, im.labels)
        qn.append(q)
        gap.append(float(abs(diff.mean() + q)))
        gap_se.append(_se(diff))
        per_rep = pair(c_agents.mean(axis=1))
        direct.append(float(per_rep.mean() - solution.cost.value))
        direct_se.append(float(np.sqrt(_se(per_rep) ** 2 + solution.cost.stderr ** 2)))
    rates = [q_rate(N, d, kappa_moment) for N in N_list]
    snapshot = dict(config.to_json(), N_list=list(N_list), kappa_moment=kappa_moment, empirical=empirical,
                    antithetic=antithetic, reference_particles=reference_particles)
    s1, _, ci1 = _safe_fit(N_list, poc)
    s2, _, ci2 = _safe_fit(N_list, gap)
    poc_report = RateReport("poc", list(N_list), poc, poc_se, rates, s1, ci1, config.seed, repetitions, snapshot,
                            extra={"nonincreasing_2sigma": nonincreasing_within(poc, poc_se),
                                   "strictly_decreasing_2sigma": decreasing_beyond(poc, poc_se),
                                   "slope_band": [-0.7, -0.3],
                                   "slope_in_band": bool(-0.7 <= s1 <= -0.3)})
    base = 0 if gap[0] > 0 else None
    envelope = None
    if base is not None:
        envelope = bool(all(gp <= 10 * r * gap[0] / rates[0] + 2 * se
                            for gp, r, se in zip(gap, rates, gap_se)))
    gap_report = RateReport("costgap", list(N_list), gap, gap_se, rates, s2, ci2, config.seed, repetitions,
                            snapshot,
                            extra={"J_star": solution.cost.value, "J_star_stderr": solution.cost.stderr,
                                   "label_quadrature": qn, "direct_gap": direct, "direct_gap_stderr": direct_se,
                                   "nonincreasing_2sigma": nonincreasing_within(gap, gap_se),
                                   "ratio_last_first": float(gap[-1] / gap[0]) if gap[0] > 0 else 0.0,
                                   "envelope_ok": envelope})
    return poc_report, gap_report


def poc_experiment(model, g: Graphon, N_list, repetitions: int, config: SimConfig, solution=None,
                   **kw) -> RateReport:
    return convergence_experiments(model, g, N_list, repetitions, config, solution, **kw)[0]


def cost_gap_experiment(model, g: Graphon, N_list, repetitions: int, config: SimConfig, solution=None,
                        **kw) -> RateReport:
    return convergence_experiments(model, g, N_list, repetitions, config, solution, **kw)[1]


# ---------------------------------------------------------------------------
# stability and continuity


def solution_distance(a: FbsdeSolution, b: FbsdeSolution, labels_a=None, labels_b=None):
    """Coupled ``E[sup|dX|^2 + sup|dY|^2 + int |dZ|^2 dt]`` averaged over the chosen labels.

    Returns ``(value, stderr)``; with label index lists the labels are paired.
    """
    ia = np.arange(a.flow.grid.M) if labels_a is None else np.asarray(labels_a)
    ib = ia if labels_b is None else np.asarray(labels_b)
    dt = np.diff(a.flow.times)
    dx = np.sum((a.flow.states[ia] - b.flow.states[ib]) ** 2, axis=-1).max(axis=1)
    dy = np.sum((a.adjoint.Y[ia] - b.adjoint.Y[ib]) ** 2, axis=-1).max(axis=1)
    dz = np.einsum("lkp,k->lp", np.sum((a.adjoint.Z[ia] - b.adjoint.Z[ib]) ** 2, axis=(-2, -1)), dt)
    per = dx + dy + dz                             # (L, P)
    P = per.shape[1]
    se = per.std(axis=1, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(len(per))
    return float(per.mean()), float(np.sqrt(np.sum(se ** 2)) / len(per))


def stability_experiment(model, g: Graphon, g_prime: Graphon, config: SimConfig,
                         s_grid=(0.0, 0.25, 0.5, 0.75, 1.0)) -> dict:
    """Solutions along ``G_s = (1 - s) G + s G'`` with shared inputs, against ``||G_s - G||_1``."""
    grid = config.grid
    inputs = draw_inputs(model, config)
    base = solve_pontryagin_fbsde(model, normalize(g, grid), config, inputs=inputs)
    rows = []
    for s in s_grid:
        gs = mix_graphons(g, g_prime, s)
        sol = solve_pontryagin_fbsde(model, normalize(gs, grid), config, inputs=inputs)
        dist, se = solution_distance(base, sol)
        rows.append({"s": s, "l1": l1_distance(gs, g, grid), "distance": dist, "stderr": se,
                     "iterations": sol.iterations})
    # envelope through the origin fixed by the far endpoint; interior points must lie below it
    end = rows[-1]
    slope = end["distance"] / end["l1"] if end["l1"] > 0 else 0.0
    envelope = True
    for r in rows:
        w = r["l1"] / end["l1"] if end["l1"] > 0 else 0.0
        band = 2 * np.sqrt(r["stderr"] ** 2 + (w * end["stderr"]) ** 2)
        envelope &= r["distance"] <= slope * r["l1"] + band
    zero = [r for r in rows if r["s"] == 0.0]
    return {"name": "stability", "rows": rows, "envelope_slope": slope, "envelope_ok": bool(envelope),
            "zero_at_origin": bool(all(r["distance"] == 0.0 for r in zero)),
            "l1_full": l1_distance(g_prime, g, grid), "config": config.to_json()}


def continuity_experiment(model, g: Graphon, label_pairs, config: SimConfig) -> dict:
    """Coupled distances between label pairs on the canonical space (shared noise, quantile-coupled
    initial states)."""
    grid = config.grid
    inputs = draw_inputs(model, config, coupling="canonical")
    sol = solve_pontryagin_fbsde(model, normalize(g, grid), config, inputs=inputs)
    rows = []
    for u1, u2 in label_pairs:
        i1, i2 = grid.cell_of([u1])[0], grid.cell_of([u2])[0]
        dist, se = solution_distance(sol, sol, [i1], [i2])
        row_gap = float(np.abs(g(np.array([u1]), grid.midpoints) - g(np.array([u2]), grid.midpoints)).mean())
        m1, s1 = model.initial.params([u1])
        m2, s2 = model.initial.params([u2])
        init_gap = float(np.sum((m1 - m2) ** 2) + np.sum((s1 - s2) ** 2))
        rows.append({"u1": u1, "u2": u2, "du": abs(u1 - u2), "cells": [int(i1), int(i2)], "distance": dist,
                     "stderr": se, "bound_rhs": init_gap + row_gap})
    order = sorted(range(len(rows)), key=lambda j: -rows[j]["du"])
    seq = [rows[j] for j in order if rows[j]["du"] > 0]
    monotone = nonincreasing_within([r["distance"] for r in seq], [r["stderr"] for r in seq])
    same = [r for r in rows if r["cells"][0] == r["cells"][1]]
    return {"name": "continuity", "rows": rows, "monotone_2sigma": monotone,
            "identical_zero": bool(all(r["distance"] == 0.0 for r in same)), "config": config.to_json()}


def write_report(report: dict, directory, columns) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=float))
    with open(directory / f"{report['name']}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in report["rows"]:
            w.writerow([repr(r[c]) for c in columns])
