import numpy as np
import pytest
from scipy.integrate import solve_ivp

from gmfc.adjoint import solve_pontryagin_fbsde
from gmfc.builtins import reference
from gmfc.errors import LabelMismatch, ZeroRow
from gmfc.forward import SimConfig
from gmfc.graphon import Graphon, LabelGrid, l1_distance, normalize, step_graphon_from_matrix
from gmfc.model import FunctionalModel, InitialLaw, LinearQuadraticSpec
from gmfc.nagent import (AgentTable, InteractionMatrix, ZeroAgentControl, agent_initials,
                         decentralized_controls_from_gmfc, sample_interaction_matrix, simulate_nagent, cost_nagent)

ONE = Graphon.constant(1.0)


def test_constant_graphon_matrix():
    im = sample_interaction_matrix(ONE, 3)
    assert np.array_equal(im.zeta, np.ones((3, 3)))
    assert np.allclose(im.kappa, 1 / 3)
    with pytest.raises(ZeroRow):
        sample_interaction_matrix(Graphon.constant(0.0), 3)


def test_block_matrix_reconstructs_graphon():
    g = step_graphon_from_matrix([[1, 0], [0, 1]])
    im = sample_interaction_matrix(g, 4)
    assert np.array_equal(im.zeta, np.kron(np.eye(2), np.ones((2, 2))))
    assert l1_distance(im.step_graphon(), g, LabelGrid(4)) == 0.0


def test_bernoulli_matrix_is_symmetric_and_seeded():
    g = step_graphon_from_matrix([[0.9, 0.4], [0.4, 0.9]])
    a = sample_interaction_matrix(g, 40, "bernoulli", 3)
    b = sample_interaction_matrix(g, 40, "bernoulli", 3)
    assert np.array_equal(a.zeta, b.zeta) and np.array_equal(a.zeta, a.zeta.T)
    assert set(np.unique(a.zeta)) <= {0.0, 0.9, 1.0}
    assert np.allclose(a.kappa.sum(axis=1), 1.0, atol=1e-12)


def lq(**kw):
    return LinearQuadraticSpec((1, 1, 1), **kw)


def test_single_agent_without_dynamics_stays_put():
    im = InteractionMatrix.from_zeta([[1.0]])
    paths = simulate_nagent(lq(), im, ZeroAgentControl(1), np.array([[0.7]]), 10, 1.0)
    assert np.all(paths.states == 0.7)


def test_constant_drift_moves_every_agent_by_horizon():
    im = sample_interaction_matrix(ONE, 5)
    x0 = np.linspace(-1, 1, 5)[:, None]
    paths = simulate_nagent(lq(b0=1.0), im, ZeroAgentControl(1), x0, 13, 2.5)
    assert np.allclose(paths.states[0, :, -1], x0 + 2.5, atol=1e-12)


def test_two_agents_relax_to_common_mean():
    im = sample_interaction_matrix(ONE, 2)
    paths = simulate_nagent(lq(b1=-1.0, b2=1.0), im, ZeroAgentControl(1), np.array([[0.0], [2.0]]), 10_000, 5.0)
    ode = solve_ivp(lambda t, x: np.full(2, x.mean()) - x, (0, 5), [0.0, 2.0], method="RK45",
                    rtol=1e-12, atol=1e-12)
    end = paths.states[0, :, -1, 0]
    assert np.all(np.abs(end - 1.0) <= 1e-2)
    assert np.allclose(end, ode.y[:, -1], atol=1e-2)


def fixed_cost_model(value):
    n = lambda x: x.shape[0]
    return FunctionalModel(
        (1, 1, 1), b=lambda u, t, x, mu, a: np.zeros((n(x), 1)), sigma=lambda u, t, x, mu, a: np.zeros((n(x), 1, 1)),
        f=lambda u, t, x, mu, a: np.full(n(x), value), g=lambda u, x, mu: np.zeros(n(x)),
        dx_f=lambda u, t, x, mu, a: np.zeros_like(x), dx_g=lambda u, x, mu: np.zeros_like(x),
        da_f=lambda u, t, x, mu, a: np.zeros_like(a))


@pytest.mark.parametrize("value, T, expected", [(0.0, 1.0, 0.0), (1.0, 2.0, 2.0)])
def test_constant_running_costs(value, T, expected):
    im = sample_interaction_matrix(ONE, 3)
    model = fixed_cost_model(value)
    paths = simulate_nagent(model, im, ZeroAgentControl(1), np.zeros((3, 1)), 8, T)
    assert cost_nagent(model, paths, im) == pytest.approx(expected, abs=1e-12)


def test_terminal_square_cost_two_agents():
    im = sample_interaction_matrix(ONE, 2)
    model = lq(qT=2.0)
    paths = simulate_nagent(model, im, ZeroAgentControl(1), np.array([[0.0], [2.0]]), 4, 1.0)
    assert cost_nagent(model, paths, im) == pytest.approx(2.0)


def test_open_loop_table_and_repetitions():
    im = sample_interaction_matrix(ONE, 3)
    R, n = 2, 4
    table = AgentTable(np.ones((R, 3, n, 1)))
    x0 = agent_initials(InitialLaw.normal(0.0, 1.0), 0, 3, R)
    paths = simulate_nagent(lq(b3=1.0), im, table, x0, n, 1.0)
    assert paths.states.shape == (R, 3, n + 1, 1)
    assert np.allclose(paths.states[:, :, -1], x0 + 1.0)
    again = simulate_nagent(lq(b3=1.0, s0=0.3), im, table, x0, n, 1.0, seed=5)
    twice = simulate_nagent(lq(b3=1.0, s0=0.3), im, table, x0, n, 1.0, seed=5)
    assert np.array_equal(again.states, twice.states)


def gains_of(fb, k, R=1):
    N = fb.im.N
    x0, x1 = np.zeros((R, N, 1)), np.ones((R, N, 1))
    return (fb.evaluate(k, 0.0, x1) - fb.evaluate(k, 0.0, x0))[0, :, 0]


def test_decentralized_feedback_by_block():
    ref = reference("lq-2block")
    cfg = SimConfig(M=2, P=400, n_steps=10)
    sol = solve_pontryagin_fbsde(ref.model, normalize(ref.graphon, cfg.grid), cfg)
    im = sample_interaction_matrix(ref.graphon, 6)
    fb = decentralized_controls_from_gmfc(sol, im)
    g = gains_of(fb, 3)
    # the solver's fitted feedback is a blend that agrees with the pointwise minimizer at convergence
    blocks = sol.control.coefs[:, 3, 1, 0]
    assert np.ptp(g[:3]) == 0.0 and np.ptp(g[3:]) == 0.0
    assert g[0] == pytest.approx(blocks[0], rel=1e-4) and g[3] == pytest.approx(blocks[1], rel=1e-4)
    with pytest.raises(LabelMismatch):
        decentralized_controls_from_gmfc(sol, im, grid=LabelGrid(3))


def test_decentralized_feedback_shared_and_zero():
    ref = reference("lq-scalar")
    cfg = SimConfig(M=1, P=300, n_steps=10)
    sol = solve_pontryagin_fbsde(ref.model, normalize(ONE, cfg.grid), cfg)
    fb = decentralized_controls_from_gmfc(sol, sample_interaction_matrix(ONE, 8))
    a = fb.evaluate(2, cfg.times[2], np.full((1, 8, 1), 0.3))
    assert np.ptp(a) == 0.0
    zero = LinearQuadraticSpec(b1=-0.5, b3=1.0, s0=0.5, s=0.0, initial=InitialLaw.normal(1.0, 0.5))
    sol0 = solve_pontryagin_fbsde(zero, normalize(ONE, cfg.grid), cfg)
    fb0 = decentralized_controls_from_gmfc(sol0, sample_interaction_matrix(ONE, 5))
    assert np.abs(fb0.evaluate(0, 0.0, np.random.default_rng(0).standard_normal((2, 5, 1)))).max() == 0.0
