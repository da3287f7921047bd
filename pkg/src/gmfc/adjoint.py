"""Backward adjoint equation by least-squares Monte Carlo, the coupled Pontryagin solver
and optimality diagnostics.

The backward scheme is the adjoint of the Euler forward scheme.  At each step,
regressions of ``Y_{k+1}`` and ``Y_{k+1} dW_k^T / dt`` on basis functions of
``X_k`` give ``Yh_k`` and ``Z_k`` for every label; the cross-label coupling is
then formed from those values, and

    Y_k = Yh_k + dt [dx H(t_k, X_k, G_k, Yh_k, Z_k, a_k) + coupling_k(X_k)].

The Hamiltonian at step ``k`` is always evaluated at ``(Yh_k, Z_k)``, which is
what makes ``sum_k dt E[da H . beta_k]`` the derivative of the Euler cost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as streams
from .errors import AdjointDivergence, OuterDivergence, RegressionSingular
from .forward import (BasisFeedback, ControlProfile, CostEstimate, SimConfig, SimInputs, TableControl,
                      _neighborhood_moments, basis_size, batched_view, draw_inputs, features,
                      particle_costs, picard_fixed_point, summarize_costs)
from .graphon import NormalizedGraphon
from .measure import MeasureFlow, MeasureView
from .model import argmin_hamiltonian, grad_hamiltonian_alpha, grad_hamiltonian_x, \
    measure_derivative_hamiltonian

COND_MAX = 1e12


@dataclass(eq=False)
class AdjointFlow:
    basis: str
    Y: np.ndarray          # (M, N_t+1, P, d), exact terminal values at N_t
    Yh: np.ndarray         # (M, N_t, P, d), regressed conditional expectations
    Z: np.ndarray          # (M, N_t, P, d, m)
    y_coefs: np.ndarray    # (M, N_t, nb, d) on standardized features
    z_coefs: np.ndarray    # (M, N_t, nb, d*m)
    shift: np.ndarray      # (M, N_t, d)
    scale: np.ndarray      # (M, N_t, d)
    residuals: np.ndarray  # (M, N_t) mean-square regression residual of Y
    conditions: np.ndarray  # (M, N_t)

    def _phi(self, i, k, x):
        return features(self.basis, (np.asarray(x, float) - self.shift[i, k]) / self.scale[i, k])

    def y_at(self, i, k, x):
        """Regression representation of ``E[Y_{k+1} | X_k = x]`` for label ``i``."""
        return self._phi(i, k, x) @ self.y_coefs[i, k]

    def z_at(self, i, k, x):
        out = self._phi(i, k, x) @ self.z_coefs[i, k]
        return out.reshape(out.shape[:-1] + self.Z.shape[-2:])


def _regress(x, targets, basis, dw=None):
    """Batched least squares over labels: ``x (L, P, d)``, ``targets (L, P, r)``.

    With ``dw (L, P, m)`` (scaled to unit variance) the design is augmented by
    ``phi(x) * dw``; the ``phi`` block then estimates the conditional
    expectation with the martingale increment removed, and the ``dw`` block
    estimates the conditional covariance with the increment.
    """
    L, P, d = x.shape
    shift = x.mean(axis=1)
    spread = x.std(axis=1)
    degenerate = spread <= 1e-14 * np.maximum(1.0, np.abs(shift))
    scale = np.where(degenerate, 1.0, spread)
    phi = features(basis, (x - shift[:, None]) / scale[:, None])
    nb = phi.shape[-1]
    design = phi if dw is None else np.concatenate(
        [phi, (phi[..., :, None] * dw[..., None, :]).reshape(L, P, -1)], axis=-1)
    n = design.shape[-1]
    gram = np.einsum("lpa,lpb->lab", design, design) / P
    rhs = np.einsum("lpa,lpr->lar", design, targets) / P
    coefs = np.zeros((L, n, targets.shape[-1]))
    conds = np.ones(L)
    for i in range(L):
        cols = np.arange(n)
        if degenerate[i].all():
            # a point mass: only the constant column (and its noise block) is informative
            cols = np.arange(0, n, nb)
        sub = gram[i][np.ix_(cols, cols)]
        cond = np.linalg.cond(sub)
        conds[i] = cond
        if not np.isfinite(cond) or cond > COND_MAX:
            raise RegressionSingular(i, -1, float(cond))
        coefs[i, cols] = np.linalg.solve(sub, rhs[i, cols])
    fitted = np.einsum("lpa,lar->lpr", design, coefs)
    return coefs, phi, fitted, shift, scale, conds


def _probe_free_mu_average(model, u, t, x, view, yh, z, a, P, L):
    """Per-label particle averages of the measure derivative of H (probe-independent case)."""
    probe = np.zeros_like(x)
    vals = measure_derivative_hamiltonian(model, u, t, x, view, yh, z, a, probe)
    return vals.reshape(L, P, -1).mean(axis=1)


def _coupling_all(model, flow, W, k, t, u_rows, x_rows, view, yh, z, a, mc_count, rng):
    """Coupling term at every particle, ``(M*P, d)``."""
    M, P, d = flow.grid.M, flow.particles, flow.dim
    if not model.mu_probe_dependent:
        avg = _probe_free_mu_average(model, u_rows, t, x_rows, view, yh, z, a, P, M)
        return np.repeat(W.T @ avg, P, axis=0)
    out = np.zeros((M * P, d))
    for v in range(M):
        src = np.arange(v * P, (v + 1) * P)
        if mc_count:
            src = rng.choice(src, size=min(mc_count, P), replace=False)
        acc = np.zeros((M * P, d))
        for s in src:
            rows = np.full(M * P, s)
            sub = MeasureView(view.mean[rows], view.second_moment[rows], cloud_of=view.cloud_of,
                              row_labels=np.full(M * P, v))
            acc += measure_derivative_hamiltonian(model, u_rows[rows], t, x_rows[rows], sub,
                                                  yh[rows], z[rows], a[rows], x_rows)
        out += np.repeat(W[v], P)[:, None] * acc / len(src)
    return out


def adjoint_coupling_term(model, flow: MeasureFlow, adjoint: AdjointFlow, ng: NormalizedGraphon,
                          t_index: int, x_probe, u_index: int, mc_count: int = 0, rng=None):
    """``sum_v W[v, u] * mean over label v of dmu H^v(...)(x_probe)`` at one probe."""
    M, P, d = flow.grid.M, flow.particles, flow.dim
    W = ng.weight_matrix
    k = t_index
    t = flow.times[k]
    nb_means, nb_seconds = _neighborhood_moments(flow, W)
    labels = np.arange(M)
    view = batched_view(flow, W, nb_means, nb_seconds, k, labels, P)
    x = flow.states[:, k].reshape(M * P, d)
    u = np.repeat(flow.grid.midpoints, P)
    yh = adjoint.Yh[:, k].reshape(M * P, d)
    z = adjoint.Z[:, k].reshape(M * P, d, -1)
    a = flow.controls[:, k].reshape(M * P, -1)
    rng = rng or np.random.default_rng(0)
    probe = np.broadcast_to(np.asarray(x_probe, float).reshape(1, d), (M * P, d))
    total = np.zeros(d)
    for v in range(M):
        src = np.arange(v * P, (v + 1) * P)
        if mc_count:
            src = rng.choice(src, size=min(mc_count, P), replace=False)
        sub = MeasureView(view.mean[src], view.second_moment[src], cloud_of=view.cloud_of,
                          row_labels=view.row_labels[src])
        vals = measure_derivative_hamiltonian(model, u[src], t, x[src], sub, yh[src], z[src], a[src],
                                              probe[:len(src)])
        total += W[v, u_index] * vals.mean(axis=0)
    return total


def solve_adjoint(model, control, flow: MeasureFlow, ng: NormalizedGraphon, config: SimConfig) -> AdjointFlow:
    if flow.increments is None or flow.controls is None:
        raise ValueError("solve_adjoint needs a flow with recorded increments and controls")
    M, K1, P, d = flow.states.shape
    N = K1 - 1
    m = model.m
    W = ng.weight_matrix
    basis = config.basis
    nb = basis_size(basis, d)
    labels = np.arange(M)
    u = np.repeat(flow.grid.midpoints, P)
    nb_means, nb_seconds = _neighborhood_moments(flow, W)
    rng = streams.stream(config.seed, streams.PROBE)

    Y = np.empty((M, K1, P, d))
    Yh = np.empty((M, N, P, d))
    Z = np.empty((M, N, P, d, m))
    y_coefs = np.empty((M, N, nb, d))
    z_coefs = np.empty((M, N, nb, d * m))
    shifts = np.empty((M, N, d))
    scales = np.empty((M, N, d))
    res = np.empty((M, N))
    conds = np.empty((M, N))

    # terminal condition, exact per particle
    xT = flow.states[:, N].reshape(M * P, d)
    viewT = batched_view(flow, W, nb_means, nb_seconds, N, labels, P)
    yT = model.dx_g(u, xT, viewT)
    if model.mu_probe_dependent:
        probe_term = np.zeros((M * P, d))
        for v in range(M):
            src = np.arange(v * P, (v + 1) * P)
            acc = np.zeros((M * P, d))
            for s in src:
                rows = np.full(M * P, s)
                sub = MeasureView(viewT.mean[rows], viewT.second_moment[rows], cloud_of=viewT.cloud_of,
                                  row_labels=np.full(M * P, v))
                acc += model.dmu_g(u[rows], xT[rows], sub, xT)
            probe_term += np.repeat(W[v], P)[:, None] * acc / P
        yT = yT + probe_term
    else:
        avg = model.dmu_g(u, xT, viewT, np.zeros_like(xT)).reshape(M, P, d).mean(axis=1)
        yT = yT + np.repeat(W.T @ avg, P, axis=0)
    Y[:, N] = yT.reshape(M, P, d)

    for k in range(N - 1, -1, -1):
        t = flow.times[k]
        dt = flow.times[k + 1] - t
        xk = flow.states[:, k]
        dw = flow.increments[:, :, k, :]
        ynext = Y[:, k + 1]
        if config.regression == "joint":
            coefs, phi, fitted, shift, scale, cond = _regress(xk, ynext, basis, dw / np.sqrt(dt))
            y_coefs[:, k] = coefs[:, :nb]
            # E[Y dW^T | X] / dt from the dW block: coefficient / sqrt(dt)
            zc = coefs[:, nb:].reshape(M, nb, m, d).transpose(0, 1, 3, 2) / np.sqrt(dt)
            z_coefs[:, k] = zc.reshape(M, nb, d * m)
            res[:, k] = np.mean(np.sum((ynext - fitted) ** 2, axis=-1), axis=1)
        else:
            targets = np.concatenate([ynext, (ynext[..., :, None] * dw[..., None, :]).reshape(M, P, d * m) / dt],
                                     axis=-1)
            coefs, phi, fitted, shift, scale, cond = _regress(xk, targets, basis)
            y_coefs[:, k], z_coefs[:, k] = coefs[..., :d], coefs[..., d:]
            res[:, k] = np.mean(np.sum((ynext - fitted[..., :d]) ** 2, axis=-1), axis=1)
        shifts[:, k], scales[:, k], conds[:, k] = shift, scale, cond
        Yh[:, k] = np.einsum("lpa,lar->lpr", phi, y_coefs[:, k])
        Z[:, k] = np.einsum("lpa,lar->lpr", phi, z_coefs[:, k]).reshape(M, P, d, m)

        view = batched_view(flow, W, nb_means, nb_seconds, k, labels, P)
        x_rows = xk.reshape(M * P, d)
        yh_rows = Yh[:, k].reshape(M * P, d)
        z_rows = Z[:, k].reshape(M * P, d, m)
        a_rows = flow.controls[:, k].reshape(M * P, -1)
        drive = grad_hamiltonian_x(model, u, t, x_rows, view, yh_rows, z_rows, a_rows)
        drive = drive + _coupling_all(model, flow, W, k, t, u, x_rows, view, yh_rows, z_rows, a_rows,
                                      config.mc_count, rng)
        Y[:, k] = Yh[:, k] + dt * drive.reshape(M, P, d)
        if not np.all(np.isfinite(Y[:, k])):
            raise AdjointDivergence(f"non-finite adjoint values at step {k}")
    return AdjointFlow(basis, Y, Yh, Z, y_coefs, z_coefs, shifts, scales, res, conds)


# ---------------------------------------------------------------------------
# Pontryagin solver


@dataclass(eq=False)
class FbsdeSolution:
    flow: MeasureFlow
    adjoint: AdjointFlow
    control: ControlProfile
    cost: CostEstimate
    pontryagin_residual: float
    iterations: int
    residual_history: list
    residual_l2: float = 0.0
    inputs: Optional[SimInputs] = None
    ng: Optional[NormalizedGraphon] = None
    config: Optional[SimConfig] = None
    model: object = None
    info: dict = field(default_factory=dict)

    def gains(self) -> np.ndarray:
        """Affine feedback gains ``(M, N_t)`` for scalar state and action."""
        return self.control.coefs[:, :, 1, 0]

    def export(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        means_x = self.flow.label_means()
        means_y = self.adjoint.Y.mean(axis=2)
        with open(directory / "solution.csv", "w") as fh:
            fh.write("t,label,mean_x,mean_y,gain\n")
            for i in range(self.flow.grid.M):
                for k, t in enumerate(self.flow.times):
                    gain = self.control.coefs[i, min(k, self.control.coefs.shape[1] - 1), 1:, :]
                    fh.write(f"{t!r},{i},{means_x[i, k, 0]!r},{means_y[i, k, 0]!r},{float(gain.ravel()[0])!r}\n")
        diag = {"cost": self.cost.value, "cost_stderr": self.cost.stderr,
                "pontryagin_residual": self.pontryagin_residual, "residual_l2": self.residual_l2,
                "iterations": self.iterations, "residual_history": self.residual_history,
                "picard_history": self.flow.info.get("picard_history", []),
                "max_condition": float(self.adjoint.conditions.max()),
                "config": self.config.to_json() if self.config else None}
        (directory / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True))


def controls_along(control: ControlProfile, flow: MeasureFlow, ng: NormalizedGraphon) -> np.ndarray:
    """Evaluate a control along a flow, ``(M, N_t, P, k)``."""
    W = ng.weight_matrix
    nb_means, nb_seconds = _neighborhood_moments(flow, W)
    labels = np.arange(flow.grid.M)
    return np.stack([control.evaluate(k, flow.times[k], labels, flow.states[:, k],
                                      batched_view(flow, W, nb_means, nb_seconds, k, labels, flow.particles))
                     for k in range(len(flow.times) - 1)], axis=1)


def optimal_controls(model, flow: MeasureFlow, adjoint: AdjointFlow, ng: NormalizedGraphon) -> np.ndarray:
    """Pointwise Hamiltonian minimizers on the particles, ``(M, N_t, P, k)``."""
    M, K1, P, d = flow.states.shape
    W = ng.weight_matrix
    nb_means, nb_seconds = _neighborhood_moments(flow, W)
    labels = np.arange(M)
    u = np.repeat(flow.grid.midpoints, P)
    out = np.empty((M, K1 - 1, P, model.k))
    for k in range(K1 - 1):
        view = batched_view(flow, W, nb_means, nb_seconds, k, labels, P)
        a = argmin_hamiltonian(model, u, flow.times[k], flow.states[:, k].reshape(M * P, d), view,
                               adjoint.Yh[:, k].reshape(M * P, d),
                               adjoint.Z[:, k].reshape(M * P, d, model.m))
        out[:, k] = np.asarray(a).reshape(M, P, model.k)
    return out


def fit_feedback(basis: str, flow: MeasureFlow, values: np.ndarray) -> np.ndarray:
    """Least-squares basis coefficients ``(M, N_t, nb, k)`` for per-particle controls."""
    x = flow.states[:, :-1]
    phi = features(basis, x)
    gram = np.einsum("mtpa,mtpb->mtab", phi, phi)
    rhs = np.einsum("mtpa,mtpk->mtak", phi, values)
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.einsum("mtab,mtbk->mtak", np.linalg.pinv(gram), rhs)


def hamiltonian_gradients(model, flow: MeasureFlow, adjoint: AdjointFlow, ng: NormalizedGraphon,
                          controls: Optional[np.ndarray] = None) -> np.ndarray:
    """``da H`` at every particle and step, ``(M, N_t, P, k)``."""
    controls = flow.controls if controls is None else controls
    M, K1, P, d = flow.states.shape
    W = ng.weight_matrix
    nb_means, nb_seconds = _neighborhood_moments(flow, W)
    labels = np.arange(M)
    u = np.repeat(flow.grid.midpoints, P)
    out = np.empty(controls.shape)
    for k in range(K1 - 1):
        view = batched_view(flow, W, nb_means, nb_seconds, k, labels, P)
        g = grad_hamiltonian_alpha(model, u, flow.times[k], flow.states[:, k].reshape(M * P, d), view,
                                   adjoint.Yh[:, k].reshape(M * P, d),
                                   adjoint.Z[:, k].reshape(M * P, d, model.m),
                                   controls[:, k].reshape(M * P, -1))
        out[:, k] = g.reshape(M, P, -1)
    return out


def pontryagin_residual(model, solution: FbsdeSolution, config: Optional[SimConfig] = None,
                        controls: Optional[np.ndarray] = None):
    """``(sup, l2)`` of ``|da H|`` over labels, times and particles at the solution triple.

    ``controls`` replaces the recorded controls while keeping the state and adjoint fixed.
    """
    grads = hamiltonian_gradients(model, solution.flow, solution.adjoint, solution.ng, controls)
    norms = np.linalg.norm(grads, axis=-1)
    return float(norms.max()), float(np.sqrt(np.mean(norms**2)))


def evaluate_control(model, control, ng, config, inputs, start=None):
    flow = picard_fixed_point(model, control, ng, config, inputs=inputs, start=start)
    adjoint = solve_adjoint(model, control, flow, ng, config)
    return flow, adjoint


def solve_pontryagin_fbsde(model, ng: NormalizedGraphon, config: SimConfig, initial_law=None,
                           inputs: Optional[SimInputs] = None, basis: Optional[str] = None,
                           initial_control: Optional[BasisFeedback] = None) -> FbsdeSolution:
    basis = basis or config.basis
    if basis != config.basis:
        config = SimConfig(**{**config.to_json(), "basis": basis})
    inputs = inputs or draw_inputs(model, config, initial_law)
    nb = basis_size(basis, model.d)
    coefs = (initial_control.coefs.copy() if initial_control is not None
             else np.zeros((config.M, config.n_steps, nb, model.k)))
    control = BasisFeedback(basis, coefs)
    history, flow = [], None
    for it in range(1, config.outer_max + 1):
        flow, adjoint = evaluate_control(model, control, ng, config, inputs, start=flow)
        target = optimal_controls(model, flow, adjoint, ng)
        new_coefs = (1 - config.rho) * control.coefs + config.rho * fit_feedback(basis, flow, target)
        new_control = BasisFeedback(basis, new_coefs)
        change = float(np.sqrt(np.mean(np.sum((controls_along(new_control, flow, ng) - flow.controls) ** 2,
                                              axis=-1))))
        history.append(change)
        control = new_control
        if not np.isfinite(change):
            raise OuterDivergence(history)
        if change <= config.outer_tol:
            break
    else:
        raise OuterDivergence(history)
    flow, adjoint = evaluate_control(model, control, ng, config, inputs, start=flow)
    sol = FbsdeSolution(flow, adjoint, control, summarize_costs(particle_costs(model, flow, ng)),
                        0.0, it, history, inputs=inputs, ng=ng, config=config, model=model)
    sol.pontryagin_residual, sol.residual_l2 = pontryagin_residual(model, sol)
    return sol


def solution_for_control(model, control, ng, config, inputs) -> FbsdeSolution:
    """Flow, adjoint and cost of an arbitrary control packaged like a solver result."""
    flow, adjoint = evaluate_control(model, control, ng, config, inputs)
    sol = FbsdeSolution(flow, adjoint, control, summarize_costs(particle_costs(model, flow, ng)),
                        0.0, 0, [], inputs=inputs, ng=ng, config=config, model=model)
    sol.pontryagin_residual, sol.residual_l2 = pontryagin_residual(model, sol)
    return sol


# ---------------------------------------------------------------------------
# first- and second-order optimality diagnostics


def gateaux_derivative(model, control, direction: ControlProfile, flow: MeasureFlow, adjoint: AdjointFlow,
                       ng: NormalizedGraphon) -> float:
    """``int_I E int da H . beta dt du`` by label, particle and left-Riemann time quadrature."""
    beta = controls_along(direction, flow, ng)
    grads = hamiltonian_gradients(model, flow, adjoint, ng)
    dt = np.diff(flow.times)
    per = np.einsum("mtpk,mtpk->mtp", grads, beta).mean(axis=2)
    return float(np.mean(per @ dt))


def open_loop(control: ControlProfile, flow: MeasureFlow, ng) -> TableControl:
    return TableControl(controls_along(control, flow, ng))


def random_direction(flow: MeasureFlow, seed: int, index: int) -> TableControl:
    """Open-loop direction ``c0 + c1 t + c2 X_t`` along the particles of ``flow``.

    Coefficients are drawn once per direction; the direction is adapted since it
    only uses the state at the current step.
    """
    c0, c1, c2 = streams.stream(seed, streams.DIRECTION, 0, index).uniform(-1.0, 1.0, 3)
    x = flow.states[:, :-1]
    t = flow.times[:-1][None, :, None, None]
    return TableControl(c0 + c1 * t + c2 * x)


def cost_of(model, control, ng, config, inputs, start=None) -> np.ndarray:
    flow = picard_fixed_point(model, control, ng, config, inputs=inputs, start=start)
    return particle_costs(model, flow, ng)


@dataclass
class PerturbationReport:
    passed: bool
    min_delta: float
    min_delta_stderr: float
    min_z: float
    rows: list

    def to_json(self):
        return {"pass": self.passed, "min_delta": self.min_delta, "min_delta_stderr": self.min_delta_stderr,
                "min_z": self.min_z, "rows": self.rows}


def optimality_perturbation_test(model, solution: FbsdeSolution, directions: int = 8,
                                 eps_grid=(0.05, 0.1, 0.2), seed: int = 0, config=None) -> PerturbationReport:
    """Cost change of ``alpha + eps beta`` under common random numbers, for random ``beta``.

    The solution control is frozen as an open-loop table along its own particles,
    so the unperturbed cost is reproduced exactly and every perturbation is a
    paired comparison.  PASS iff no change is below minus three standard errors.
    """
    ng, inputs = solution.ng, solution.inputs
    config = config or solution.config
    flow = solution.flow
    base = open_loop(solution.control, flow, ng)
    base_costs = cost_of(model, base, ng, config, inputs, start=flow)
    rows, worst = [], None
    for j in range(directions):
        beta = random_direction(flow, seed, j)
        for eps in eps_grid:
            trial = TableControl(base.values + eps * beta.values)
            diff = cost_of(model, trial, ng, config, inputs, start=flow) - base_costs
            est = summarize_costs(diff)
            z = est.value / est.stderr if est.stderr > 0 else (0.0 if est.value == 0 else np.sign(est.value) * np.inf)
            rows.append({"direction": j, "eps": eps, "delta": est.value, "stderr": est.stderr, "z": float(z)})
            if worst is None or z < worst["z"]:
                worst = rows[-1]
    passed = all(r["z"] >= -3.0 for r in rows)
    return PerturbationReport(passed, worst["delta"], worst["stderr"], worst["z"], rows)


def gateaux_check(model, ng: NormalizedGraphon, config: SimConfig, controls: int = 2, directions: int = 5,
                  eps: float = 1e-3, seed: Optional[int] = None) -> dict:
    """Adjoint-formula directional derivatives against common-random-number central differences.

    Base controls are random affine feedbacks frozen as open-loop tables along
    their own flow; directions are ``c0 + c1 t + c2 X_t`` tables with ``c0 > 0``.
    """
    seed = config.seed if seed is None else seed
    inputs = draw_inputs(model, config, seed=seed)
    rows = []
    for c in range(controls):
        offset, gain = streams.stream(seed, streams.DIRECTION, 1 + c, 0).uniform([-0.5, -1.5], [0.5, -0.5])
        feedback = BasisFeedback.affine(config.M, config.n_steps, offset, gain, model.d, model.k)
        flow = picard_fixed_point(model, feedback, ng, config, inputs=inputs)
        base = open_loop(feedback, flow, ng)
        flow, adjoint = evaluate_control(model, base, ng, config, inputs, start=flow)
        for j in range(directions):
            c0, c1, c2 = streams.stream(seed, streams.DIRECTION, 1 + c, 1 + j).uniform([0.5, -0.5, -0.5],
                                                                                       [1.5, 0.5, 0.5])
            x = flow.states[:, :-1]
            t = flow.times[:-1][None, :, None, None]
            beta = TableControl(np.broadcast_to(c0 + c1 * t + c2 * x, base.values.shape).copy())
            formula = gateaux_derivative(model, base, beta, flow, adjoint, ng)
            up = cost_of(model, TableControl(base.values + eps * beta.values), ng, config, inputs, start=flow)
            down = cost_of(model, TableControl(base.values - eps * beta.values), ng, config, inputs, start=flow)
            fd = float((up.mean() - down.mean()) / (2 * eps))
            rows.append({"control": c, "direction": j, "offset": float(offset), "gain": float(gain),
                         "beta": [float(c0), float(c1), float(c2)], "adjoint": formula, "fd": fd,
                         "rel_error": abs(formula - fd) / max(abs(fd), 1e-300)})
    return {"name": "gateaux", "eps": eps, "rows": rows, "max_rel_error": max(r["rel_error"] for r in rows)}
