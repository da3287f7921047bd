"""Reference models registered by name."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphon import Graphon, step_graphon_from_matrix
from .model import InitialLaw, LinearQuadraticSpec

SCALAR_PARAMS = dict(b0=0.2, b1=-0.5, b2=0.4, b3=1.0, s0=0.5, q=1.0, qbar=1.0, s=0.5,
                     qT=1.0, qbarT=0.5, sT=0.5, **{"lambda": 0.5})


class ConvexNonLQ(LinearQuadraticSpec):
    """Linear dynamics, additive noise, running cost ``c x^4/4 + qbar|x - s m|^2/2 + lambda a^2``.

    The minimizer is found by the generic Newton path.
    """

    def __init__(self, quartic=0.5, **kw):
        super().__init__(**kw)
        self.quartic = quartic
        self.probe_range = 3.0

    def f(self, u, t, x, mu, a):
        dev = self._dev(u, t, x, mu, "s")
        return (0.25 * self.quartic * np.sum(x**4, axis=1)
                + 0.5 * self.c("qbar", u, t) * np.sum(dev * dev, axis=1)
                + self.c("lambda", u, t) * np.sum(a * a, axis=1))

    def dx_f(self, u, t, x, mu, a):
        return self.quartic * x**3 + self.c("qbar", u, t)[:, None] * self._dev(u, t, x, mu, "s")

    def argmin(self, u, t, x, mu, y, z):
        return None


@dataclass
class Reference:
    model: object
    graphon: Graphon
    basis: str = "affine"
    M: int = 16


def lq_scalar() -> Reference:
    model = LinearQuadraticSpec((1, 1, 1), name="lq-scalar",
                                initial=InitialLaw.normal(1.0, 0.5), **SCALAR_PARAMS)
    return Reference(model, Graphon.constant(1.0))


def lq_2block() -> Reference:
    params = dict(SCALAR_PARAMS, q={"label_blocks": [1.0, 2.0]})
    initial = InitialLaw.normal({"label_blocks": [1.0, -0.5]}, 0.5)
    model = LinearQuadraticSpec((1, 1, 1), name="lq-2block", initial=initial, **params)
    return Reference(model, step_graphon_from_matrix([[1.0, 0.3], [0.3, 1.0]]))


def convex_nonlq() -> Reference:
    params = {k: v for k, v in SCALAR_PARAMS.items() if k != "q"}
    model = ConvexNonLQ(dims=(1, 1, 1), name="convex-nonlq",
                        initial=InitialLaw.normal(1.0, 0.5), **params)
    return Reference(model, Graphon.constant(1.0), basis="quadratic")


def lq_hetero(cells: int = 20) -> Reference:
    """Scalar LQ with initial mean ``u`` (piecewise constant on ``cells`` cells) and graphon ``1 + uv/2``."""
    means = ((np.arange(cells) + 0.5) / cells).tolist()
    initial = InitialLaw.normal({"label_blocks": means}, 0.5)
    model = LinearQuadraticSpec((1, 1, 1), name="lq-hetero", initial=initial, **SCALAR_PARAMS)
    return Reference(model, Graphon.from_function(lambda u, v: 1.0 + 0.5 * u * v), M=cells)


REGISTRY = {"lq-scalar": lq_scalar, "lq-2block": lq_2block, "convex-nonlq": convex_nonlq,
            "lq-hetero": lq_hetero}


def reference(name: str) -> Reference:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown built-in model {name!r}; choose from {sorted(REGISTRY)}") from None
