import numpy as np
import pytest
from scipy.integrate import solve_ivp

from gmfc.builtins import reference
from gmfc.errors import PicardDivergence
from gmfc.forward import (BasisFeedback, SimConfig, ZeroControl, constant_flow, cost, draw_inputs,
                          picard_fixed_point, simulate_label)
from gmfc.graphon import Graphon, normalize
from gmfc.model import FunctionalModel, InitialLaw, LinearQuadraticSpec

ONE = Graphon.constant(1.0)


def lq(**kw):
    init = kw.pop("initial", InitialLaw.normal(1.0, 0.0))
    return LinearQuadraticSpec((1, 1, 1), initial=init, **kw)


def frozen(model, cfg):
    inputs = draw_inputs(model, cfg)
    return inputs, constant_flow(cfg.grid, cfg.times, inputs.x0)


def run_label(model, cfg):
    inputs, flow = frozen(model, cfg)
    return inputs, simulate_label(model, ZeroControl(), flow, normalize(ONE, cfg.grid), 0, cfg, inputs)


def test_zero_dynamics_keep_initial_samples():
    cfg = SimConfig(M=1, P=50, n_steps=10)
    inputs, path = run_label(lq(initial=InitialLaw.normal(0.0, 1.0)), cfg)
    assert np.array_equal(path, np.repeat(inputs.x0[0][None], 11, axis=0))


@pytest.mark.parametrize("n_steps", [1, 7, 100])
def test_constant_drift_is_exact(n_steps):
    cfg = SimConfig(M=1, P=20, n_steps=n_steps)
    inputs, path = run_label(lq(b0=1.0, initial=InitialLaw.normal(0.0, 1.0)), cfg)
    assert np.allclose(path[-1], inputs.x0[0] + 1.0, atol=1e-12)


def test_linear_decay_matches_exponential():
    cfg = SimConfig(M=1, P=4, n_steps=10_000)
    _, path = run_label(lq(b1=-1.0), cfg)
    assert np.all(np.abs(path[-1] - np.exp(-1.0)) <= 1e-3)


def test_decoupled_picard_needs_two_iterations():
    cfg = SimConfig(M=4, P=100, n_steps=20)
    flow = picard_fixed_point(lq(b1=-0.5, s0=0.5), ZeroControl(), normalize(ONE, cfg.grid), cfg)
    assert flow.info["picard_iterations"] == 2
    assert flow.info["picard_history"][-1] == 0.0


def test_zero_dynamics_converge_in_one_check():
    cfg = SimConfig(M=3, P=10, n_steps=5)
    flow = picard_fixed_point(lq(initial=InitialLaw.normal(0.0, 1.0)), ZeroControl(), normalize(ONE, cfg.grid), cfg)
    assert flow.info["picard_iterations"] == 1 and flow.info["picard_history"] == [0.0]


def test_picard_divergence_is_reported():
    cfg = SimConfig(M=2, P=50, n_steps=20, picard_max=3, picard_tol=1e-14)
    with pytest.raises(PicardDivergence):
        picard_fixed_point(lq(b2=3.0, s0=0.5), ZeroControl(), normalize(ONE, cfg.grid), cfg)


def test_mean_field_fixed_point_matches_mean_ode():
    model = reference("lq-scalar").model
    cfg = SimConfig(M=8, P=2000, n_steps=100)
    flow = picard_fixed_point(model, ZeroControl(), normalize(ONE, cfg.grid), cfg)
    b0, b1, b2 = (float(model.c(k, np.array([0.5]), 0.0).ravel()[0]) for k in ("b0", "b1", "b2"))
    sol = solve_ivp(lambda t, m: b0 + (b1 + b2) * m, (0, 1), [1.0], method="RK45", t_eval=cfg.times,
                    rtol=1e-12, atol=1e-12)
    means = flow.label_means()[:, :, 0]
    se = flow.states[..., 0].std(axis=2, ddof=1) / np.sqrt(cfg.P)
    z = np.abs(means - sol.y[0][None]) / np.maximum(se, 1e-12)
    assert z[:, 10::10].max() <= 3.0


def const_cost_model(f_value):
    n = lambda x: x.shape[0]
    return FunctionalModel(
        (1, 1, 1), b=lambda u, t, x, mu, a: np.zeros((n(x), 1)), sigma=lambda u, t, x, mu, a: np.zeros((n(x), 1, 1)),
        f=lambda u, t, x, mu, a: np.full(n(x), f_value), g=lambda u, x, mu: np.zeros(n(x)),
        dx_f=lambda u, t, x, mu, a: np.zeros_like(x), dx_g=lambda u, x, mu: np.zeros_like(x),
        da_f=lambda u, t, x, mu, a: np.zeros_like(a))


@pytest.mark.parametrize("f_value, T, expected", [(0.0, 1.0, 0.0), (1.0, 2.0, 2.0)])
def test_constant_costs(f_value, T, expected):
    model = const_cost_model(f_value)
    model.initial = InitialLaw.normal(0.0, 1.0)
    cfg = SimConfig(M=2, P=10, n_steps=8, T=T)
    flow = picard_fixed_point(model, ZeroControl(), normalize(ONE, cfg.grid), cfg)
    est = cost(model, ZeroControl(), flow, normalize(ONE, cfg.grid), cfg)
    assert est.value == pytest.approx(expected, abs=1e-12) and est.stderr == pytest.approx(0.0, abs=1e-12)


def test_terminal_square_cost():
    model = lq(qT=2.0, initial=InitialLaw.normal(0.0, 1.0))
    cfg = SimConfig(M=1, P=10_000, n_steps=2)
    flow = picard_fixed_point(model, ZeroControl(), normalize(ONE, cfg.grid), cfg)
    est = cost(model, ZeroControl(), flow, normalize(ONE, cfg.grid), cfg)
    assert abs(est.value - 1.0) <= 5 * est.stderr


def test_inputs_are_counter_based():
    model = reference("lq-scalar").model
    a = draw_inputs(model, SimConfig(M=4, P=10, n_steps=5))
    b = draw_inputs(model, SimConfig(M=4, P=20, n_steps=5))
    assert np.array_equal(a.x0, b.x0[:, :10]) and np.array_equal(a.dW, b.dW[:, :10])
    assert np.array_equal(draw_inputs(model, SimConfig(M=4, P=10, n_steps=5, threads=8)).dW, a.dW)
    anti = draw_inputs(model, SimConfig(M=2, P=10, n_steps=5), coupling="antithetic")
    assert np.allclose(anti.x0[:, :5] + anti.x0[:, 5:], 2.0) and np.array_equal(anti.dW[:, 5:], -anti.dW[:, :5])
    canon = draw_inputs(model, SimConfig(M=3, P=10, n_steps=5), coupling="canonical")
    assert np.array_equal(canon.dW[0], canon.dW[2])


def test_affine_feedback_evaluation():
    fb = BasisFeedback.affine(2, 3, offset=0.5, gain=-2.0)
    x = np.array([[[1.0], [2.0]], [[0.0], [-1.0]]])
    assert np.allclose(fb.evaluate(0, 0.0, np.arange(2), x, None)[..., 0], 0.5 - 2.0 * x[..., 0])
