"""Coefficient sets, the Hamiltonian and its pointwise minimizer.

Every evaluator is vectorized over a batch of ``n`` points:

* ``b(u, t, x, mu, a) -> (n, d)``, ``sigma(...) -> (n, d, m)``, ``f(...) -> (n,)``
* ``g(u, x, mu) -> (n,)``
* ``dx_b -> (n, d, d)`` with ``[i, j] = d b_i / d x_j``; ``dx_sigma -> (n, d, m, d)``;
  ``dx_f, dx_g -> (n, d)``
* ``da_b -> (n, d, k)``, ``da_sigma -> (n, d, m, k)``, ``da_f -> (n, k)``
* ``dmu_b(u, t, x, mu, a, probe) -> (n, d, d)``, ``dmu_sigma -> (n, d, m, d)``,
  ``dmu_f -> (n, d)``, ``dmu_g(u, x, mu, probe) -> (n, d)``

``u`` is an array of labels of shape ``(n,)``, ``t`` a float, ``x`` is ``(n, d)``,
``a`` is ``(n, k)`` and ``mu`` is a :class:`MeasureView`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gamma, ndtri

from . import rng as streams
from .errors import NonConvergence, NonConvexDetected, ShapeMismatch
from .graphon import cell_index
from .measure import MeasureView, ParticleCloud, wasserstein2

NEWTON_TOL = 1e-10
NEWTON_MAX = 200


class CoefficientSet:
    """Base class for models; subclasses override the evaluators."""

    name = "model"
    d = m = k = 1
    # strong convexity constant of f in alpha, if declared
    convexity: Optional[float] = None
    # declared Lipschitz constants, e.g. {"b": 2.0, "f": 10.0}
    lipschitz: dict = {}
    probe_range: float = 3.0
    # False when every measure derivative ignores the probe point
    mu_probe_dependent: bool = False

    def b(self, u, t, x, mu, a): raise NotImplementedError
    def sigma(self, u, t, x, mu, a): raise NotImplementedError
    def f(self, u, t, x, mu, a): raise NotImplementedError
    def g(self, u, x, mu): raise NotImplementedError
    def dx_b(self, u, t, x, mu, a): raise NotImplementedError
    def dx_sigma(self, u, t, x, mu, a): raise NotImplementedError
    def dx_f(self, u, t, x, mu, a): raise NotImplementedError
    def dx_g(self, u, x, mu): raise NotImplementedError
    def da_b(self, u, t, x, mu, a): raise NotImplementedError
    def da_sigma(self, u, t, x, mu, a): raise NotImplementedError
    def da_f(self, u, t, x, mu, a): raise NotImplementedError

    def dmu_b(self, u, t, x, mu, a, probe):
        return np.zeros((len(x), self.d, self.d))

    def dmu_sigma(self, u, t, x, mu, a, probe):
        return np.zeros((len(x), self.d, self.m, self.d))

    def dmu_f(self, u, t, x, mu, a, probe):
        return np.zeros((len(x), self.d))

    def dmu_g(self, u, x, mu, probe):
        return np.zeros((len(x), self.d))

    def argmin(self, u, t, x, mu, y, z):
        """Closed-form minimizer of the Hamiltonian, or ``None`` if unavailable."""
        return None

    def time_knots(self) -> list:
        """Times where coefficients may jump (besides 0)."""
        return []


class FunctionalModel(CoefficientSet):
    """A model assembled from plain callables, for code-registered examples.

    Missing derivatives of ``b``/``sigma`` default to zero, which is only
    correct for coefficients that do not depend on the corresponding argument.
    """

    def __init__(self, dims, b, sigma, f, g, dx_f, dx_g, da_f, *, name="functional",
                 dx_b=None, dx_sigma=None, da_b=None, da_sigma=None,
                 dmu_b=None, dmu_sigma=None, dmu_f=None, dmu_g=None,
                 argmin=None, convexity=None, lipschitz=None, probe_range=3.0,
                 mu_probe_dependent=False):
        self.d, self.m, self.k = dims
        self.name = name
        self._b, self._sigma, self._f, self._g = b, sigma, f, g
        self._dx_f, self._dx_g, self._da_f = dx_f, dx_g, da_f
        self._dx_b, self._dx_sigma, self._da_b, self._da_sigma = dx_b, dx_sigma, da_b, da_sigma
        self._dmu = dict(b=dmu_b, sigma=dmu_sigma, f=dmu_f, g=dmu_g)
        self._argmin = argmin
        self.convexity = convexity
        self.lipschitz = dict(lipschitz or {})
        self.probe_range = probe_range
        self.mu_probe_dependent = mu_probe_dependent

    def b(self, u, t, x, mu, a): return self._b(u, t, x, mu, a)
    def sigma(self, u, t, x, mu, a): return self._sigma(u, t, x, mu, a)
    def f(self, u, t, x, mu, a): return self._f(u, t, x, mu, a)
    def g(self, u, x, mu): return self._g(u, x, mu)
    def dx_f(self, u, t, x, mu, a): return self._dx_f(u, t, x, mu, a)
    def dx_g(self, u, x, mu): return self._dx_g(u, x, mu)
    def da_f(self, u, t, x, mu, a): return self._da_f(u, t, x, mu, a)

    def dx_b(self, u, t, x, mu, a):
        if self._dx_b is None:
            return np.zeros((len(x), self.d, self.d))
        return self._dx_b(u, t, x, mu, a)

    def dx_sigma(self, u, t, x, mu, a):
        if self._dx_sigma is None:
            return np.zeros((len(x), self.d, self.m, self.d))
        return self._dx_sigma(u, t, x, mu, a)

    def da_b(self, u, t, x, mu, a):
        if self._da_b is None:
            return np.zeros((len(x), self.d, self.k))
        return self._da_b(u, t, x, mu, a)

    def da_sigma(self, u, t, x, mu, a):
        if self._da_sigma is None:
            return np.zeros((len(x), self.d, self.m, self.k))
        return self._da_sigma(u, t, x, mu, a)

    def dmu_b(self, u, t, x, mu, a, probe):
        fn = self._dmu["b"]
        return super().dmu_b(u, t, x, mu, a, probe) if fn is None else fn(u, t, x, mu, a, probe)

    def dmu_sigma(self, u, t, x, mu, a, probe):
        fn = self._dmu["sigma"]
        return super().dmu_sigma(u, t, x, mu, a, probe) if fn is None else fn(u, t, x, mu, a, probe)

    def dmu_f(self, u, t, x, mu, a, probe):
        fn = self._dmu["f"]
        return super().dmu_f(u, t, x, mu, a, probe) if fn is None else fn(u, t, x, mu, a, probe)

    def dmu_g(self, u, x, mu, probe):
        fn = self._dmu["g"]
        return super().dmu_g(u, x, mu, probe) if fn is None else fn(u, x, mu, probe)

    def argmin(self, u, t, x, mu, y, z):
        return None if self._argmin is None else self._argmin(u, t, x, mu, y, z)


# ---------------------------------------------------------------------------
# label- and time-dependent coefficient tables


class Coef:
    shape: tuple = ()

    def at(self, u, t) -> np.ndarray:
        """Values at labels ``u`` (shape ``(n,)``) and time ``t``: ``(n, *shape)``."""
        raise NotImplementedError

    def knots(self) -> set:
        return set()

    def label_constant(self) -> bool:
        return True


class ConstCoef(Coef):
    def __init__(self, value, shape):
        self.shape = shape
        self.value = _as_shape(value, shape)

    def at(self, u, t):
        return np.broadcast_to(self.value, (len(u),) + self.shape)


class TimeCoef(Coef):
    """Piecewise constant in time; ``values[j]`` applies on ``[knots[j], knots[j+1])``."""

    def __init__(self, knots, values, shape):
        knots = [float(s) for s in knots]
        if len(knots) != len(values) or knots[0] != 0.0 or np.any(np.diff(knots) <= 0):
            raise ValueError("time_knots must start at 0, increase, and match values")
        self.shape = shape
        self._knots = np.asarray(knots)
        self.values = [parse_coef(v, shape) for v in values]

    def at(self, u, t):
        j = int(np.searchsorted(self._knots, t, side="right")) - 1
        return self.values[max(j, 0)].at(u, t)

    def knots(self):
        out = set(self._knots[1:].tolist())
        for v in self.values:
            out |= v.knots()
        return out

    def label_constant(self):
        return all(v.label_constant() for v in self.values)


class BlockCoef(Coef):
    """Constant on the cells of an equal partition of the label interval."""

    def __init__(self, blocks, shape):
        if not blocks:
            raise ValueError("label_blocks must not be empty")
        self.shape = shape
        self.blocks = [parse_coef(v, shape) for v in blocks]

    def at(self, u, t):
        u = np.asarray(u, float)
        idx = cell_index(u, len(self.blocks))
        out = np.empty((len(u),) + self.shape)
        for j in np.unique(idx):
            sel = idx == j
            out[sel] = self.blocks[j].at(u[sel], t)
        return out

    def knots(self):
        out = set()
        for v in self.blocks:
            out |= v.knots()
        return out

    def label_constant(self):
        return False


def _as_shape(value, shape) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return arr
    if arr.ndim == 0:
        # a scalar for a square matrix means a multiple of the identity
        if len(shape) == 2 and shape[0] == shape[1]:
            return float(arr) * np.eye(shape[0])
        return np.full(shape, float(arr))
    if arr.size == int(np.prod(shape)):
        return arr.reshape(shape)
    raise ShapeMismatch(f"coefficient of shape {arr.shape} cannot be read as {shape}")


def parse_coef(value, shape) -> Coef:
    if isinstance(value, Coef):
        return value
    if isinstance(value, dict):
        if "label_blocks" in value:
            return BlockCoef(value["label_blocks"], shape)
        if "time_knots" in value:
            return TimeCoef(value["time_knots"], value["values"], shape)
        raise ValueError(f"unrecognized coefficient table keys {sorted(value)}")
    return ConstCoef(value, shape)


# ---------------------------------------------------------------------------
# initial laws


@dataclass(eq=False)
class InitialLaw:
    """Independent Gaussian coordinates with label-dependent mean and std."""

    mean: Coef
    std: Coef
    d: int = 1
    epsilon: float = 1.0

    def params(self, u):
        u = np.atleast_1d(np.asarray(u, float))
        return self.mean.at(u, 0.0), self.std.at(u, 0.0)

    def sample(self, seed: int, label_index: int, u: float, indices) -> np.ndarray:
        """Initial states for particles ``indices`` of one label, ``(len(indices), d)``."""
        z = streams.normals(seed, streams.INITIAL, label_index, indices, (self.d,))
        mean, std = self.params([u])
        return mean[0] + std[0] * z

    def quantile(self, u: float, levels) -> np.ndarray:
        """Coordinate-wise quantile transform of uniforms ``levels`` (shape ``(n, d)``)."""
        mean, std = self.params([u])
        return mean[0] + std[0] * ndtri(np.asarray(levels, float))

    def moment_bound(self, u=None) -> float:
        """Upper bound on ``E|xi|^(2+eps)`` over labels, from the Gaussian moments."""
        p = 2.0 + self.epsilon
        grid = np.linspace(0.0, 1.0, 257) if u is None else np.atleast_1d(u)
        mean, std = self.params(grid)
        mnorm = np.linalg.norm(mean.reshape(len(grid), -1), axis=1)
        snorm = np.linalg.norm(std.reshape(len(grid), -1), axis=1)
        # |X| <= |m| + |S Z| and E|Z_d|^p for a standard d-dim normal
        abs_moment = 2 ** (p / 2) * gamma((self.d + p) / 2) / gamma(self.d / 2)
        return float(np.max(2 ** (p - 1) * (mnorm**p + snorm**p * abs_moment)))

    def moment_report(self, seed: int = 0, samples: int = 10_000, labels: int = 8) -> dict:
        p = 2.0 + self.epsilon
        worst = 0.0
        for j in range(labels):
            u = (j + 0.5) / labels
            x = self.sample(seed, j, u, np.arange(samples))
            worst = max(worst, float(np.mean(np.linalg.norm(x, axis=1) ** p)))
        bound = self.moment_bound()
        return {"order": p, "sampled": worst, "bound": bound,
                "pass": bool(np.isfinite(worst) and worst <= bound)}

    @classmethod
    def normal(cls, mean=0.0, std=1.0, d=1, epsilon=1.0) -> "InitialLaw":
        return cls(parse_coef(mean, (d,)), parse_coef(std, (d,)), d, epsilon)


# ---------------------------------------------------------------------------
# linear-quadratic models


LQ_KEYS = ("b0", "b1", "b2", "b3", "s0", "s1", "s2", "s3")
COST_KEYS = ("q", "qbar", "s", "lambda", "qT", "qbarT", "sT")


class LinearQuadraticSpec(CoefficientSet):
    """Affine dynamics in ``(x, mean, alpha)`` with quadratic running and terminal costs.

    ``b = b0 + b1 x + b2 m + b3 a``; ``sigma = s0 + s1 x + s2 m + s3 a`` with
    ``s1, s2`` of shape ``(d, m, d)`` and ``s3`` of shape ``(d, m, k)``.
    ``f = q|x|^2/2 + qbar|x - s m|^2/2 + lambda|a|^2``,
    ``g = qT|x|^2/2 + qbarT|x - sT m|^2/2``.
    """

    def __init__(self, dims=(1, 1, 1), name="lq", initial: Optional[InitialLaw] = None, **coefs):
        self.d, self.m, self.k = d, m, k = dims
        self.name = name
        shapes = {"b0": (d,), "b1": (d, d), "b2": (d, d), "b3": (d, k),
                  "s0": (d, m), "s1": (d, m, d), "s2": (d, m, d), "s3": (d, m, k)}
        self.coefs = {}
        for key in LQ_KEYS:
            self.coefs[key] = parse_coef(coefs.pop(key, 0.0), shapes[key])
        for key in COST_KEYS:
            default = 1.0 if key in ("lambda", "s", "sT") else 0.0
            self.coefs[key] = parse_coef(coefs.pop(key, default), ())
        if coefs:
            raise ValueError(f"unknown LQ keys {sorted(coefs)}")
        self.initial = initial or InitialLaw.normal(d=d)
        self.convexity = self.min_lambda()
        self.lipschitz = {}

    # coefficient lookup
    def c(self, key, u, t):
        return self.coefs[key].at(np.atleast_1d(np.asarray(u, float)), t)

    def time_knots(self):
        out = set()
        for c in self.coefs.values():
            out |= c.knots()
        return sorted(out)

    def label_constant(self) -> bool:
        return all(c.label_constant() for c in self.coefs.values()) and \
            self.initial.mean.label_constant() and self.initial.std.label_constant()

    def min_lambda(self) -> float:
        grid = np.linspace(0.0, 1.0, 257)
        times = [0.0] + self.time_knots()
        return float(min(self.c("lambda", grid, t).min() for t in times))

    def min_weight(self) -> float:
        grid = np.linspace(0.0, 1.0, 257)
        times = [0.0] + self.time_knots()
        return float(min(self.c(kk, grid, t).min() for t in times
                         for kk in ("q", "qbar", "qT", "qbarT")))

    # dynamics
    def b(self, u, t, x, mu, a):
        ex = np.einsum
        mean = np.broadcast_to(mu.mean, x.shape)
        return (self.c("b0", u, t) + ex("nij,nj->ni", self.c("b1", u, t), x)
                + ex("nij,nj->ni", self.c("b2", u, t), mean)
                + ex("nij,nj->ni", self.c("b3", u, t), a))

    def sigma(self, u, t, x, mu, a):
        ex = np.einsum
        mean = np.broadcast_to(mu.mean, x.shape)
        return (self.c("s0", u, t) + ex("nijl,nl->nij", self.c("s1", u, t), x)
                + ex("nijl,nl->nij", self.c("s2", u, t), mean)
                + ex("nijl,nl->nij", self.c("s3", u, t), a))

    def _dev(self, u, t, x, mu, sk):
        return x - self.c(sk, u, t)[:, None] * mu.mean

    def f(self, u, t, x, mu, a):
        dev = self._dev(u, t, x, mu, "s")
        return (0.5 * self.c("q", u, t) * np.sum(x * x, axis=1)
                + 0.5 * self.c("qbar", u, t) * np.sum(dev * dev, axis=1)
                + self.c("lambda", u, t) * np.sum(a * a, axis=1))

    def g(self, u, x, mu):
        T = np.inf
        dev = self._dev(u, T, x, mu, "sT")
        return (0.5 * self.c("qT", u, T) * np.sum(x * x, axis=1)
                + 0.5 * self.c("qbarT", u, T) * np.sum(dev * dev, axis=1))

    # derivatives
    def dx_b(self, u, t, x, mu, a): return self.c("b1", u, t)
    def dx_sigma(self, u, t, x, mu, a): return self.c("s1", u, t)
    def da_b(self, u, t, x, mu, a): return self.c("b3", u, t)
    def da_sigma(self, u, t, x, mu, a): return self.c("s3", u, t)
    def dmu_b(self, u, t, x, mu, a, probe): return self.c("b2", u, t)
    def dmu_sigma(self, u, t, x, mu, a, probe): return self.c("s2", u, t)

    def dx_f(self, u, t, x, mu, a):
        return self.c("q", u, t)[:, None] * x + self.c("qbar", u, t)[:, None] * self._dev(u, t, x, mu, "s")

    def da_f(self, u, t, x, mu, a):
        return 2.0 * self.c("lambda", u, t)[:, None] * a

    def dmu_f(self, u, t, x, mu, a, probe):
        return -(self.c("s", u, t) * self.c("qbar", u, t))[:, None] * self._dev(u, t, x, mu, "s")

    def dx_g(self, u, x, mu):
        T = np.inf
        return self.c("qT", u, T)[:, None] * x + self.c("qbarT", u, T)[:, None] * self._dev(u, T, x, mu, "sT")

    def dmu_g(self, u, x, mu, probe):
        T = np.inf
        return -(self.c("sT", u, T) * self.c("qbarT", u, T))[:, None] * self._dev(u, T, x, mu, "sT")

    def argmin(self, u, t, x, mu, y, z):
        lin = (np.einsum("nik,ni->nk", self.c("b3", u, t), y)
               + np.einsum("nijk,nij->nk", self.c("s3", u, t), z))
        return -lin / (2.0 * self.c("lambda", u, t))[:, None]

    # serialization
    @classmethod
    def from_json(cls, source, name=None) -> "LinearQuadraticSpec":
        data = source
        if isinstance(source, (str, Path)):
            data = json.loads(Path(source).read_text())
            name = name or Path(source).stem
        data = dict(data)
        dims = data.pop("dims", [1, 1, 1])
        if isinstance(dims, dict):
            dims = [dims["d"], dims["m"], dims["k"]]
        dims = tuple(int(v) for v in dims)
        init = data.pop("initial", None)
        initial = None
        if init is not None:
            initial = InitialLaw.normal(init.get("mean", 0.0), init.get("std", 1.0), dims[0],
                                        float(init.get("epsilon", 1.0)))
        data.pop("name", None)
        return cls(dims, name=name or "lq", initial=initial, **data)


# ---------------------------------------------------------------------------
# Hamiltonian and friends


def as_view(mu) -> MeasureView:
    if isinstance(mu, MeasureView):
        return mu
    if isinstance(mu, ParticleCloud):
        return MeasureView.of_cloud(mu)
    return MeasureView.dirac(mu)


def _batch(model, u, x, y=None, z=None, a=None):
    """Promote inputs to batched arrays; returns ``single`` when the caller passed one point."""
    d, m, k = model.d, model.m, model.k
    x = np.asarray(x, float)
    single = x.ndim <= 1
    x = x.reshape(-1, d) if x.size else x.reshape(0, d)
    n = x.shape[0]

    def fix(v, shape, label):
        if v is None:
            return np.zeros((n,) + shape)
        v = np.asarray(v, float)
        if v.size == n * int(np.prod(shape)):
            return v.reshape((n,) + shape)
        raise ShapeMismatch(f"{label} has shape {v.shape}, expected {(n,) + shape}")

    if x.shape[1] != d:
        raise ShapeMismatch(f"x has shape {x.shape}, expected (n, {d})")
    u = np.broadcast_to(np.asarray(u, float), (n,)) if np.ndim(u) == 0 else np.asarray(u, float)
    if u.shape != (n,):
        raise ShapeMismatch(f"labels have shape {u.shape}, expected ({n},)")
    return single, u, x, fix(y, (d,), "y"), fix(z, (d, m), "z"), fix(a, (k,), "alpha")


def _out(single, v):
    return v[0] if single else v


def hamiltonian(model, u, t, x, mu, y, z, a):
    single, u, x, y, z, a = _batch(model, u, x, y, z, a)
    mu = as_view(mu)
    val = (np.sum(model.b(u, t, x, mu, a) * y, axis=1)
           + np.sum(model.sigma(u, t, x, mu, a) * z, axis=(1, 2))
           + model.f(u, t, x, mu, a))
    return _out(single, val)


def grad_hamiltonian_x(model, u, t, x, mu, y, z, a):
    single, u, x, y, z, a = _batch(model, u, x, y, z, a)
    mu = as_view(mu)
    val = (np.einsum("nij,ni->nj", model.dx_b(u, t, x, mu, a), y)
           + np.einsum("nijl,nij->nl", model.dx_sigma(u, t, x, mu, a), z)
           + model.dx_f(u, t, x, mu, a))
    return _out(single, val)


def grad_hamiltonian_alpha(model, u, t, x, mu, y, z, a):
    single, u, x, y, z, a = _batch(model, u, x, y, z, a)
    mu = as_view(mu)
    val = (np.einsum("nik,ni->nk", model.da_b(u, t, x, mu, a), y)
           + np.einsum("nijk,nij->nk", model.da_sigma(u, t, x, mu, a), z)
           + model.da_f(u, t, x, mu, a))
    return _out(single, val)


def measure_derivative_hamiltonian(model, u, t, x, mu, y, z, a, x_probe):
    single, u, x, y, z, a = _batch(model, u, x, y, z, a)
    mu = as_view(mu)
    probe = np.broadcast_to(np.asarray(x_probe, float).reshape(-1, model.d), x.shape)
    val = (np.einsum("nij,ni->nj", model.dmu_b(u, t, x, mu, a, probe), y)
           + np.einsum("nijl,nij->nl", model.dmu_sigma(u, t, x, mu, a, probe), z)
           + model.dmu_f(u, t, x, mu, a, probe))
    return _out(single, val)


def _hessian_alpha(model, u, t, x, mu, y, z, a, h=1e-6):
    k = a.shape[1]
    hess = np.empty((a.shape[0], k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        gp = grad_hamiltonian_alpha(model, u, t, x, mu, y, z, a + e)
        gm = grad_hamiltonian_alpha(model, u, t, x, mu, y, z, a - e)
        hess[:, :, j] = (gp - gm) / (2 * h)
    return 0.5 * (hess + np.transpose(hess, (0, 2, 1)))


def argmin_hamiltonian(model, u, t, x, mu, y, z, method: str = "auto"):
    """Unique minimizer of ``alpha -> H``.

    ``method="auto"`` uses the model's closed form when it has one, otherwise a
    damped Newton iteration from zero; ``method="newton"`` forces the latter.
    """
    single, u, x, y, z, _ = _batch(model, u, x, y, z)
    mu = as_view(mu)
    if method == "auto":
        closed = model.argmin(u, t, x, mu, y, z)
        if closed is not None:
            return _out(single, np.asarray(closed, float))
    a = np.zeros((x.shape[0], model.k))
    grad = grad_hamiltonian_alpha(model, u, t, x, mu, y, z, a)
    res = np.linalg.norm(grad, axis=1)
    for _ in range(NEWTON_MAX):
        active = res > NEWTON_TOL
        if not active.any():
            break
        idx = np.flatnonzero(active)
        sub = (u[idx], x[idx], _sub_view(mu, idx), y[idx], z[idx])
        hess = _hessian_alpha(model, sub[0], t, sub[1], sub[2], sub[3], sub[4], a[idx])
        if np.any(np.linalg.eigvalsh(hess)[:, 0] <= 0):
            raise NonConvexDetected("Hamiltonian is not convex in alpha along the Newton path")
        step = np.linalg.solve(hess, grad[idx][..., None])[..., 0]
        scale = np.ones(len(idx))
        for _ in range(60):
            trial = a[idx] - scale[:, None] * step
            g_new = grad_hamiltonian_alpha(model, sub[0], t, sub[1], sub[2], sub[3], sub[4], trial)
            r_new = np.linalg.norm(g_new, axis=1)
            worse = r_new >= res[idx]
            if not worse.any() or scale.min() < 1e-12:
                break
            scale[worse] *= 0.5
        a[idx], grad[idx], res[idx] = trial, g_new, r_new
    if np.any(res > NEWTON_TOL):
        raise NonConvergence(f"Newton did not reach tolerance in {NEWTON_MAX} steps",
                             float(res.max()))
    hess = _hessian_alpha(model, u, t, x, mu, y, z, a)
    if np.any(np.linalg.eigvalsh(hess)[:, 0] <= 0):
        raise NonConvexDetected("second difference of H in alpha is not positive at the minimizer")
    return _out(single, a)


def _sub_view(mu: MeasureView, idx) -> MeasureView:
    mean = np.asarray(mu.mean)
    if mean.ndim == 2:
        labels = None if mu.row_labels is None else mu.row_labels[idx]
        return MeasureView(mean[idx], np.asarray(mu.second_moment)[idx], mu.cloud, mu.cloud_of, labels)
    return mu


# ---------------------------------------------------------------------------
# validation


@dataclass
class CheckResult:
    assumption: str
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_json(self):
        return {"assumption": self.assumption, "check": self.name, "pass": bool(self.passed),
                **self.detail}


def _probe_state(model, rng, n, cloud_size=6):
    r = model.probe_range
    u = rng.random(n)
    t = float(rng.random())
    x = rng.uniform(-r, r, (n, model.d))
    a = rng.uniform(-r, r, (n, model.k))
    clouds = [ParticleCloud(rng.uniform(-r, r, (cloud_size, model.d))) for _ in range(n)]
    return u, t, x, a, clouds


def _view_list(clouds):
    return [MeasureView.of_cloud(c) for c in clouds]


def _call_points(fn, u, x, views, *rest):
    """Evaluate a batched evaluator point by point, each with its own measure."""
    out = [fn(u[i:i + 1], *rest[:1], x[i:i + 1], views[i], *[r[i:i + 1] for r in rest[1:]])
           for i in range(len(u))]
    return np.concatenate(out, axis=0)


def _fd_checks(model, rng, probes, h=1e-5, rtol=1e-4) -> CheckResult:
    u, t, x, a, clouds = _probe_state(model, rng, probes)
    views = _view_list(clouds)
    worst = 0.0

    def rel(fd, an):
        return float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an))))

    for i in range(probes):
        ui, xi, ai, mu = u[i:i + 1], x[i:i + 1], a[i:i + 1], views[i]
        for j in range(model.d):
            e = np.zeros((1, model.d))
            e[0, j] = h
            fd = (model.b(ui, t, xi + e, mu, ai) - model.b(ui, t, xi - e, mu, ai)) / (2 * h)
            worst = max(worst, rel(fd[0], model.dx_b(ui, t, xi, mu, ai)[0][:, j]))
            fd = (model.sigma(ui, t, xi + e, mu, ai) - model.sigma(ui, t, xi - e, mu, ai)) / (2 * h)
            worst = max(worst, rel(fd[0], model.dx_sigma(ui, t, xi, mu, ai)[0][..., j]))
            fd = (model.f(ui, t, xi + e, mu, ai) - model.f(ui, t, xi - e, mu, ai)) / (2 * h)
            worst = max(worst, rel(fd, model.dx_f(ui, t, xi, mu, ai)[:, j]))
            fd = (model.g(ui, xi + e, mu) - model.g(ui, xi - e, mu)) / (2 * h)
            worst = max(worst, rel(fd, model.dx_g(ui, xi, mu)[:, j]))
        for j in range(model.k):
            e = np.zeros((1, model.k))
            e[0, j] = h
            fd = (model.b(ui, t, xi, mu, ai + e) - model.b(ui, t, xi, mu, ai - e)) / (2 * h)
            worst = max(worst, rel(fd[0], model.da_b(ui, t, xi, mu, ai)[0][:, j]))
            fd = (model.sigma(ui, t, xi, mu, ai + e) - model.sigma(ui, t, xi, mu, ai - e)) / (2 * h)
            worst = max(worst, rel(fd[0], model.da_sigma(ui, t, xi, mu, ai)[0][..., j]))
            fd = (model.f(ui, t, xi, mu, ai + e) - model.f(ui, t, xi, mu, ai - e)) / (2 * h)
            worst = max(worst, rel(fd, model.da_f(ui, t, xi, mu, ai)[:, j]))
        # measure derivatives: move one particle of the cloud, scaled by its weight
        cloud = clouds[i]
        P = cloud.size
        p_idx = int(rng.integers(P))
        probe = cloud.points[p_idx:p_idx + 1]
        for j in range(model.d):
            plus, minus = cloud.points.copy(), cloud.points.copy()
            plus[p_idx, j] += h
            minus[p_idx, j] -= h
            vp, vm = MeasureView.of_cloud(ParticleCloud(plus)), MeasureView.of_cloud(ParticleCloud(minus))
            scale = 2 * h / P
            fd = (model.b(ui, t, xi, vp, ai) - model.b(ui, t, xi, vm, ai)) / scale
            worst = max(worst, rel(fd[0], model.dmu_b(ui, t, xi, mu, ai, probe)[0][:, j]))
            fd = (model.sigma(ui, t, xi, vp, ai) - model.sigma(ui, t, xi, vm, ai)) / scale
            worst = max(worst, rel(fd[0], model.dmu_sigma(ui, t, xi, mu, ai, probe)[0][..., j]))
            fd = (model.f(ui, t, xi, vp, ai) - model.f(ui, t, xi, vm, ai)) / scale
            worst = max(worst, rel(fd, model.dmu_f(ui, t, xi, mu, ai, probe)[:, j]))
            fd = (model.g(ui, xi, vp) - model.g(ui, xi, vm)) / scale
            worst = max(worst, rel(fd, model.dmu_g(ui, xi, mu, probe)[:, j]))
    return CheckResult("Assumption 4.1(1)", "derivative_fd_consistency", worst <= rtol,
                       {"max_relative_error": worst, "tolerance": rtol})


def _lipschitz_checks(model, rng, probes) -> list:
    u, t, x1, a1, c1 = _probe_state(model, rng, probes)
    _, _, x2, a2, c2 = _probe_state(model, rng, probes)
    v1, v2 = _view_list(c1), _view_list(c2)
    ratios = {"b": 0.0, "sigma": 0.0, "f": 0.0, "g": 0.0}
    for i in range(probes):
        ui = u[i:i + 1]
        dist_mu = wasserstein2(c1[i], c2[i])
        dist = np.linalg.norm(x1[i] - x2[i]) + np.linalg.norm(a1[i] - a2[i]) + dist_mu
        if dist <= 0:
            continue
        args1 = (ui, t, x1[i:i + 1], v1[i], a1[i:i + 1])
        args2 = (ui, t, x2[i:i + 1], v2[i], a2[i:i + 1])
        ratios["b"] = max(ratios["b"], np.linalg.norm(model.b(*args1) - model.b(*args2)) / dist)
        ratios["sigma"] = max(ratios["sigma"],
                              np.linalg.norm(model.sigma(*args1) - model.sigma(*args2)) / dist)
        ratios["f"] = max(ratios["f"], abs(float(model.f(*args1)[0] - model.f(*args2)[0])) / dist)
        dist_g = np.linalg.norm(x1[i] - x2[i]) + dist_mu
        if dist_g > 0:
            gap = abs(float(model.g(ui, x1[i:i + 1], v1[i])[0] - model.g(ui, x2[i:i + 1], v2[i])[0]))
            ratios["g"] = max(ratios["g"], gap / dist_g)
    out = []
    for key, assumption in (("b", "Assumption 3.1(3)"), ("sigma", "Assumption 3.1(3)"),
                            ("f", "Assumption 5.2(1)"), ("g", "Assumption 5.2(1)")):
        declared = model.lipschitz.get(key)
        ok = bool(np.isfinite(ratios[key])) and (declared is None or ratios[key] <= declared)
        out.append(CheckResult(assumption, f"lipschitz_{key}", ok,
                               {"empirical_ratio": float(ratios[key]), "declared": declared}))
    return out


def _convexity_checks(model, rng, probes, tol=1e-8) -> list:
    lam = model.convexity
    u, t, x1, a1, c1 = _probe_state(model, rng, probes)
    _, _, x2, a2, _ = _probe_state(model, rng, probes)
    worst_f, worst_g = np.inf, np.inf
    for i in range(probes):
        ui = u[i:i + 1]
        pts = c1[i].points
        moved = pts + rng.uniform(-1, 1, pts.shape)
        mu, mu2 = MeasureView.of_cloud(c1[i]), MeasureView.of_cloud(ParticleCloud(moved))
        xa, xb, aa, ab = x1[i:i + 1], x2[i:i + 1], a1[i:i + 1], a2[i:i + 1]
        lin_mu_f = np.mean([model.dmu_f(ui, t, xa, mu, aa, pts[j:j + 1])[0] @ (moved[j] - pts[j])
                            for j in range(len(pts))])
        gap_f = (model.f(ui, t, xb, mu2, ab)[0] - model.f(ui, t, xa, mu, aa)[0]
                 - model.dx_f(ui, t, xa, mu, aa)[0] @ (xb - xa)[0]
                 - model.da_f(ui, t, xa, mu, aa)[0] @ (ab - aa)[0] - lin_mu_f)
        target = (lam if lam is not None else 0.0) * float(np.sum((ab - aa) ** 2))
        scale = max(1.0, abs(target))
        worst_f = min(worst_f, (gap_f - target) / scale)
        lin_mu_g = np.mean([model.dmu_g(ui, xa, mu, pts[j:j + 1])[0] @ (moved[j] - pts[j])
                            for j in range(len(pts))])
        gap_g = (model.g(ui, xb, mu2)[0] - model.g(ui, xa, mu)[0]
                 - model.dx_g(ui, xa, mu)[0] @ (xb - xa)[0] - lin_mu_g)
        worst_g = min(worst_g, gap_g / max(1.0, abs(model.g(ui, xa, mu)[0])))
    lam_ok = lam is not None and lam > 0
    return [
        CheckResult("Assumption 5.2(3)", "strong_convexity_f", bool(lam_ok and worst_f >= -tol),
                    {"declared_lambda": lam, "min_normalized_gap": float(worst_f)}),
        CheckResult("Assumption 5.2(3)", "convexity_g", bool(worst_g >= -tol),
                    {"min_normalized_gap": float(worst_g)}),
    ]


def validate_model(model, probes: int = 100, rng=None, initial: Optional[InitialLaw] = None) -> dict:
    """Numerical spot checks of the standing assumptions; never mutates ``model``."""
    rng = np.random.default_rng(0) if rng is None else rng
    checks = [_fd_checks(model, rng, probes)]
    checks += _lipschitz_checks(model, rng, probes)
    checks += _convexity_checks(model, rng, probes)
    initial = initial or getattr(model, "initial", None)
    if initial is not None:
        rep = initial.moment_report()
        checks.append(CheckResult("Assumption 3.1(4)", "initial_moment", rep["pass"], rep))
    return {"model": model.name, "pass": all(c.passed for c in checks),
            "checks": [c.to_json() for c in checks]}
