"""Deterministic reference solution of linear-quadratic graphon control problems.

With volatility independent of state, mean and control, the adjoint is affine
in the state, ``Y = eta X + psi``.  ``eta`` solves a per-label Riccati equation
that does not see the graphon.  The label means ``m`` and adjoint means ``ybar``
solve a linear two-point boundary problem on the label grid:

    m'    =  A m - B ybar + c,           m(0) given
    ybar' = -A^T ybar - Qhat m,          ybar(T) = Qhat_T m(T)

with ``A = diag(b1) + diag(b2)(W x I)``, ``B = diag(b3 b3^T / (2 lambda))``,
``D = I - diag(s)(W x I)`` and ``Qhat = diag(q) + D^T diag(qbar) D``, where
``W = G~ / M`` has the neighbourhood weights as rows.  Then ``psi = ybar - eta m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RiccatiBlowup
from .forward import BasisFeedback
from .graphon import LabelGrid, NormalizedGraphon

BLOWUP = 1e12


@dataclass(eq=False)
class OracleSolution:
    grid: LabelGrid
    times: np.ndarray          # (n+1,)
    eta: np.ndarray            # (n+1, M, d, d)
    psi: np.ndarray            # (n+1, M, d)
    m: np.ndarray              # (n+1, M, d)
    ybar: np.ndarray           # (n+1, M, d)
    V: np.ndarray              # (n+1, M, d, d)
    gain: np.ndarray           # (n+1, M, k, d): alpha = gain x + offset
    offset: np.ndarray         # (n+1, M, k)
    label_costs: np.ndarray    # (M,)
    cost: float
    residual: float
    residual_parts: dict = field(default_factory=dict)

    def _interp(self, arr, t):
        t = np.atleast_1d(np.asarray(t, float))
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2) \
            if len(self.times) > 1 else np.zeros(len(t), int)
        if len(self.times) == 1:
            return arr[idx]
        t0, t1 = self.times[idx], self.times[idx + 1]
        w = ((t - t0) / (t1 - t0)).reshape((-1,) + (1,) * (arr.ndim - 1))
        return (1 - w) * arr[idx] + w * arr[idx + 1]

    def at(self, name: str, t):
        """Linear interpolation of a stored trajectory at times ``t``."""
        return self._interp(getattr(self, name), t)

    def feedback(self, times) -> BasisFeedback:
        """Affine-basis feedback with coefficients at the left end of each step of ``times``."""
        times = np.asarray(times, float)[:-1]
        gain, offset = self.at("gain", times), self.at("offset", times)
        M, k, d = gain.shape[1:]
        coefs = np.zeros((M, len(times), 1 + d, k))
        coefs[:, :, 0, :] = np.transpose(offset, (1, 0, 2))
        coefs[:, :, 1:, :] = np.transpose(gain, (1, 0, 3, 2))
        return BasisFeedback("affine", coefs)

    def to_rows(self, times):
        """Rows ``(t, label, eta, psi, m, ybar)`` for scalar state, sampled at ``times``."""
        rows = []
        eta, psi, m, yb = (self.at(n, times) for n in ("eta", "psi", "m", "ybar"))
        for a, t in enumerate(np.asarray(times, float)):
            for i in range(self.grid.M):
                rows.append([float(t), i, float(eta[a, i, 0, 0]), float(psi[a, i, 0]),
                             float(m[a, i, 0]), float(yb[a, i, 0])])
        return rows


def _segments(lq, T, ode_steps):
    knots = sorted({0.0, float(T)} | {float(s) for s in lq.time_knots() if 0.0 < s < T})
    times, seg = [0.0], []
    for j, (a, b) in enumerate(zip(knots[:-1], knots[1:])):
        n = max(1, int(round(ode_steps * (b - a) / T)))
        times.extend(np.linspace(a, b, n + 1)[1:].tolist())
        seg.extend([j] * n)
    return knots, np.asarray(times), np.asarray(seg, int)


def _coefs(lq, u, t):
    out = {key: lq.c(key, u, t) for key in ("b0", "b1", "b2", "b3", "s0", "q", "qbar", "s", "lambda")}
    out["B"] = np.einsum("mik,mjk->mij", out["b3"], out["b3"]) / (2 * out["lambda"])[:, None, None]
    return out


def _rk4_step_matrix(K, h):
    hk = h * K
    out = np.broadcast_to(np.eye(K.shape[-1]), K.shape).copy()
    term = out.copy()
    for j in range(1, 5):
        term = term @ hk / j
        out = out + term
    return out


def _riccati_rhs(eta, c, eye):
    b1 = c["b1"]
    return (-eta @ b1 - np.transpose(b1, (0, 2, 1)) @ eta + eta @ c["B"] @ eta
            - (c["q"] + c["qbar"])[:, None, None] * eye)


def lq_oracle(lq, ng: NormalizedGraphon, grid: LabelGrid, T: float = 1.0,
              ode_steps: int = 100_000, check: bool = True) -> OracleSolution:
    d = lq.d
    M = grid.M
    u = grid.midpoints
    W = ng.weight_matrix
    for key in ("s1", "s2", "s3"):
        if any(np.any(lq.c(key, u, t) != 0) for t in [0.0] + lq.time_knots()):
            raise ValueError("the oracle requires volatility independent of state, mean and control")
    eye = np.eye(d)
    terminal = {key: lq.c(key, u, np.inf) for key in ("qT", "qbarT", "sT")}

    if T == 0:
        times, seg, knots = np.zeros(1), np.zeros(0, int), [0.0]
    else:
        knots, times, seg = _segments(lq, T, ode_steps)
    n = len(times) - 1
    seg_coefs = [_coefs(lq, u, 0.5 * (a + b)) for a, b in zip(knots[:-1], knots[1:])] or [_coefs(lq, u, 0.0)]

    # Riccati, backward, through its linear Hamiltonian form: eta = P X^{-1} with
    # X' = b1 X - B P, P' = -(q + qbar) X - b1^T P, X(T) = I, P(T) = eta(T)
    XP = np.empty((n + 1, M, 2 * d, d))
    XP[n, :, :d] = eye
    XP[n, :, d:] = (terminal["qT"] + terminal["qbarT"])[:, None, None] * eye
    back = []
    for j, c in enumerate(seg_coefs):
        H = np.zeros((M, 2 * d, 2 * d))
        H[:, :d, :d], H[:, :d, d:] = c["b1"], -c["B"]
        H[:, d:, :d] = -(c["q"] + c["qbar"])[:, None, None] * eye
        H[:, d:, d:] = -np.transpose(c["b1"], (0, 2, 1))
        hseg = (knots[j + 1] - knots[j]) / max(1, int(np.sum(seg == j))) if n else 0.0
        back.append(_rk4_step_matrix(H, -hseg))
    for j in range(n - 1, -1, -1):
        XP[j] = back[seg[j]] @ XP[j + 1]
    Xh = XP[:, :, :d]
    det = np.abs(np.linalg.det(Xh))
    if not np.all(np.isfinite(XP)) or np.any(det < 1.0 / BLOWUP):
        bad = np.flatnonzero(~np.isfinite(det) | (det < 1.0 / BLOWUP))
        raise RiccatiBlowup(float(times[bad.max()]))
    Xinv = np.linalg.inv(Xh)
    eta = XP[:, :, d:] @ Xinv
    eta = 0.5 * (eta + np.transpose(eta, (0, 1, 3, 2)))
    if np.abs(eta).max() > BLOWUP:
        raise RiccatiBlowup(float(times[np.flatnonzero(np.abs(eta).max(axis=(1, 2, 3)) > BLOWUP).max()]))

    # stacked linear boundary problem for (m, ybar)
    Md = M * d
    Wd = np.kron(W, eye)

    def blocks(c, q, qbar, s):
        A = _blockdiag(c["b1"]) + _blockdiag(c["b2"]) @ Wd
        D = np.eye(Md) - np.kron(np.diag(s), eye) @ Wd
        Qhat = np.kron(np.diag(q), eye) + D.T @ np.kron(np.diag(qbar), eye) @ D
        return A, Qhat

    steps = []
    for c in seg_coefs:
        A, Qhat = blocks(c, c["q"], c["qbar"], c["s"])
        K = np.zeros((2 * Md + 1, 2 * Md + 1))
        K[:Md, :Md], K[:Md, Md:2 * Md], K[:Md, -1] = A, -_blockdiag(c["B"]), c["b0"].reshape(Md)
        K[Md:2 * Md, :Md], K[Md:2 * Md, Md:2 * Md] = -Qhat, -A.T
        steps.append(K)
    _, QhatT = blocks(seg_coefs[-1], terminal["qT"], terminal["qbarT"], terminal["sT"])
    step_mats, seg_lengths = [], np.bincount(seg, minlength=len(steps)) if n else np.zeros(1, int)
    Phi = np.eye(2 * Md + 1)
    for j, K in enumerate(steps):
        if seg_lengths[j] == 0:
            step_mats.append(None)
            continue
        h = (knots[j + 1] - knots[j]) / seg_lengths[j]
        R = _rk4_step_matrix(K, h)
        step_mats.append(R)
        Phi = np.linalg.matrix_power(R, int(seg_lengths[j])) @ Phi
    m0 = lq.initial.params(u)[0].reshape(Md)
    Lmat = np.hstack([-QhatT, np.eye(Md), np.zeros((Md, 1))])
    LP = Lmat @ Phi
    p = np.linalg.solve(LP[:, Md:2 * Md], -(LP[:, :Md] @ m0 + LP[:, -1]))
    z = np.concatenate([m0, p, [1.0]])
    traj = np.empty((n + 1, 2 * Md + 1))
    traj[0] = z
    for j in range(n):
        z = step_mats[seg[j]] @ z
        traj[j + 1] = z
    m = traj[:, :Md].reshape(n + 1, M, d)
    ybar = traj[:, Md:2 * Md].reshape(n + 1, M, d)
    psi = ybar - np.einsum("nmij,nmj->nmi", eta, m)

    # variance: the closed-loop fundamental matrix is X(t) X(s)^{-1}, so
    # V(t) = X(t) [X(0)^{-1} V0 X(0)^{-T} + int_0^t X^{-1} S S^T X^{-T} ds] X(t)^T
    node_seg = np.concatenate([seg, [seg[-1]]]) if n else np.zeros(1, int)

    def nodes(key):
        return np.stack([c[key] for c in seg_coefs])[node_seg]

    std = lq.initial.params(u)[1]
    V0 = np.einsum("mi,ij->mij", std**2, eye)
    XinvT = np.transpose(Xinv, (0, 1, 3, 2))
    inner = np.empty((n + 1, M, d, d))
    inner[0] = Xinv[0] @ V0 @ XinvT[0]
    if n:
        s0 = np.stack([c["s0"] for c in seg_coefs])[seg]
        ss = s0 @ np.transpose(s0, (0, 1, 3, 2))
        left = Xinv[:-1] @ ss @ XinvT[:-1]
        right = Xinv[1:] @ ss @ XinvT[1:]
        h = np.diff(times)[:, None, None, None]
        inner[1:] = inner[0] + np.cumsum(0.5 * h * (left + right), axis=0)
    V = Xh @ inner @ np.transpose(Xh, (0, 1, 3, 2))

    # feedback and exact cost
    lam, q, qbar, sc = nodes("lambda"), nodes("q"), nodes("qbar"), nodes("s")
    b3t = np.transpose(nodes("b3"), (0, 1, 3, 2))
    gain = -(b3t @ eta) / (2 * lam)[:, :, None, None]
    offset = -np.einsum("tmki,tmi->tmk", b3t, psi) / (2 * lam)[:, :, None]
    abar = -np.einsum("tmki,tmi->tmk", b3t, ybar) / (2 * lam)[:, :, None]
    gbar = np.einsum("uv,tvd->tud", W, m)
    trv = np.trace(V, axis1=2, axis2=3)
    dev = m - sc[:, :, None] * gbar
    var_a = np.trace(gain @ V @ np.transpose(gain, (0, 1, 3, 2)), axis1=2, axis2=3)
    running = (0.5 * q * (trv + np.sum(m**2, axis=2)) + 0.5 * qbar * (trv + np.sum(dev**2, axis=2))
               + lam * (np.sum(abar**2, axis=2) + var_a))
    devT = m[-1] - terminal["sT"][:, None] * gbar[-1]
    term = (0.5 * terminal["qT"] * (trv[-1] + np.sum(m[-1] ** 2, axis=1))
            + 0.5 * terminal["qbarT"] * (trv[-1] + np.sum(devT**2, axis=1)))
    if n:
        h = np.diff(times)[:, None]
        label_costs = np.sum(0.5 * h * (running[1:] + running[:-1]), axis=0) + term
    else:
        label_costs = term

    sol = OracleSolution(grid, times, eta, psi, m, ybar, V, gain, offset, label_costs,
                         float(label_costs.mean()), 0.0)
    if check and n >= 2:
        parts = _residuals(sol, seg, seg_coefs, terminal, W)
        sol.residual_parts = parts
        sol.residual = max(parts.values())
    return sol


def _blockdiag(mats):
    M, d, e = mats.shape
    out = np.zeros((M * d, M * e))
    for i in range(M):
        out[i * d:(i + 1) * d, i * e:(i + 1) * e] = mats[i]
    return out


def _residuals(sol, seg, seg_coefs, terminal, W) -> dict:
    """Central-difference residuals of the label-wise ODEs away from coefficient jumps."""
    times, eta, psi, m, yb = sol.times, sol.eta, sol.psi, sol.m, sol.ybar
    d = eta.shape[-1]
    eye = np.eye(d)
    n = len(times) - 1
    parts = {"riccati": 0.0, "mean": 0.0, "psi": 0.0}
    inner_nodes = np.arange(1, n)
    inner_nodes = inner_nodes[seg[inner_nodes - 1] == seg[inner_nodes]]
    ein = np.einsum
    for sid in np.unique(seg[inner_nodes]):
        J = inner_nodes[seg[inner_nodes] == sid]
        c = seg_coefs[sid]
        h2 = (times[J + 1] - times[J - 1])[:, None, None]
        e, mj, yj, pj = eta[J], m[J], yb[J], psi[J]
        gbar = ein("uv,jvd->jud", W, mj)
        b1t = np.transpose(c["b1"], (0, 2, 1))
        ric = (-e @ c["b1"] - b1t @ e + e @ c["B"] @ e
               - (c["q"] + c["qbar"])[:, None, None] * eye)
        lhs = (eta[J + 1] - eta[J - 1]) / h2[..., None]
        parts["riccati"] = max(parts["riccati"], float(np.abs(lhs - ric).max()))
        drift = (c["b0"] + ein("mij,tmj->tmi", c["b1"], mj)
                 + ein("mij,tmj->tmi", c["b2"], gbar) - ein("mij,tmj->tmi", c["B"], yj))
        parts["mean"] = max(parts["mean"], float(np.abs((m[J + 1] - m[J - 1]) / h2 - drift).max()))
        inner = (ein("mji,tmj->tmi", c["b2"], yj)
                 - (c["s"] * c["qbar"])[:, None] * (mj - c["s"][:, None] * gbar))
        coupling = ein("vu,tvd->tud", W, inner)
        rhs = (-ein("tmij,tmj->tmi", e, c["b0"] + ein("mij,tmj->tmi", c["b2"], gbar)
                    - ein("mij,tmj->tmi", c["B"], pj))
               - ein("mji,tmj->tmi", c["b1"], pj)
               + (c["qbar"] * c["s"])[:, None] * gbar - coupling)
        parts["psi"] = max(parts["psi"], float(np.abs((psi[J + 1] - psi[J - 1]) / h2 - rhs).max()))
    gT = W @ m[-1]
    sT, qbT = terminal["sT"], terminal["qbarT"]
    psiT = -(qbT * sT)[:, None] * gT - W.T @ ((sT * qbT)[:, None] * (m[-1] - sT[:, None] * gT))
    parts["terminal_psi"] = float(np.abs(psi[-1] - psiT).max())
    parts["terminal_eta"] = float(np.abs(eta[-1] - (terminal["qT"] + qbT)[:, None, None] * eye).max())
    return parts
