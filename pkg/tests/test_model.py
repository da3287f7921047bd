import numpy as np
import pytest

from gmfc.builtins import reference
from gmfc.measure import MeasureView, ParticleCloud
from gmfc.model import (FunctionalModel, LinearQuadraticSpec, argmin_hamiltonian, grad_hamiltonian_alpha,
                        grad_hamiltonian_x, hamiltonian, measure_derivative_hamiltonian, validate_model)


def const_model(b=2.0, s=1.0, f=4.0):
    n = lambda x: x.shape[0]
    return FunctionalModel(
        (1, 1, 1),
        b=lambda u, t, x, mu, a: np.full((n(x), 1), b),
        sigma=lambda u, t, x, mu, a: np.full((n(x), 1, 1), s),
        f=lambda u, t, x, mu, a: np.full(n(x), f),
        g=lambda u, x, mu: np.zeros(n(x)),
        dx_f=lambda u, t, x, mu, a: np.zeros_like(x),
        dx_g=lambda u, x, mu: np.zeros_like(x),
        da_f=lambda u, t, x, mu, a: np.zeros_like(a))


MU = MeasureView.of_cloud(ParticleCloud([0.0, 1.0]))


def test_hamiltonian_scalar_sum():
    assert hamiltonian(const_model(), 0.5, 0.0, [0.0], MU, [3.0], [[0.5]], [0.0]) == pytest.approx(10.5)
    assert hamiltonian(const_model(), 0.5, 0.0, [0.0], MU, [0.0], [[0.0]], [0.0]) == pytest.approx(4.0)


def test_lq_hamiltonian_hand_value():
    lq = LinearQuadraticSpec(b3=1.0, s0=0.7, **{"lambda": 1.0})
    h = lambda a: hamiltonian(lq, 0.5, 0.0, [0.0], MU, [2.0], [[0.0]], [a])
    assert h(-1.0) - h(0.0) == pytest.approx(-2.0 + 1.0)


def lq_random():
    return LinearQuadraticSpec((2, 2, 2), b0=[0.1, -0.2], b1=[[-0.5, 0.1], [0.2, -0.3]], b2=[[0.3, 0], [0, 0.3]],
                               b3=[[1, 0], [0.5, 1]], s0=[[0.4, 0], [0, 0.4]], s3=np.full((2, 2, 2), 0.1),
                               q=1.0, qbar=0.5, s=0.8, qT=1.0, **{"lambda": 0.7})


def test_grad_alpha_lq_formula():
    lq = lq_random()
    rng = np.random.default_rng(0)
    x, y, z, a = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal((2, 2)), rng.standard_normal(2)
    b3, s3 = lq.c("b3", np.array([0.3]), 0.0)[0], lq.c("s3", np.array([0.3]), 0.0)[0]
    expected = b3.T @ y + np.einsum("ijk,ij->k", s3, z) + 2 * 0.7 * a
    assert np.allclose(grad_hamiltonian_alpha(lq, 0.3, 0.0, x, MeasureView.dirac([0.2, 0.1]), y, z, a), expected)
    h = 1e-6
    fd = [(hamiltonian(lq, 0.3, 0.0, x, MeasureView.dirac([0.2, 0.1]), y, z, a + h * e)
           - hamiltonian(lq, 0.3, 0.0, x, MeasureView.dirac([0.2, 0.1]), y, z, a - h * e)) / (2 * h) for e in np.eye(2)]
    assert np.allclose(fd, expected, rtol=1e-6)


def test_gradients_at_zero_inputs():
    zero = LinearQuadraticSpec(**{"lambda": 1.0, "s": 0.0})
    assert np.allclose(grad_hamiltonian_alpha(zero, 0.5, 0.0, [0.0], MU, [0.0], [[0.0]], [0.0]), 0.0)
    assert np.allclose(grad_hamiltonian_x(zero, 0.5, 0.0, [0.0], MU, [0.0], [[0.0]], [0.0]), 0.0)


def test_measure_derivative_lq_terms():
    lq = LinearQuadraticSpec(b2=0.6, qbar=2.0, s=0.5)
    mu = MeasureView.of_cloud(ParticleCloud([0.0, 2.0]))          # mean 1
    x = np.array([0.4])
    # f carries qbar/2 (x - s m)^2, so d_mu f (x') = -qbar s (x - s m), independent of x'
    for probe in (-1.0, 3.0):
        got = measure_derivative_hamiltonian(lq, 0.5, 0.0, x, mu, [0.0], [[0.0]], [0.0], [probe])
        assert got[0] == pytest.approx(-2.0 * 0.5 * (0.4 - 0.5))
        # b2 m acting on y = b2 y
        got = measure_derivative_hamiltonian(LinearQuadraticSpec(b2=0.6, s=0.0), 0.5, 0.0, x, mu, [3.0], [[0.0]],
                                             [0.0], [probe])
        assert got[0] == pytest.approx(1.8)
    got = measure_derivative_hamiltonian(LinearQuadraticSpec(), 0.5, 0.0, x, mu, [0.0], [[0.0]], [0.0], [1.0])
    assert got[0] == 0.0


def test_measure_derivative_matches_particle_fd():
    lq = LinearQuadraticSpec(qbar=2.0, s=0.5)
    pts = np.array([0.0, 1.0, 3.0])
    x, j, h = np.array([0.4]), 2, 1e-6
    f = lambda p: lq.f(np.array([0.5]), 0.0, x[None], MeasureView.of_cloud(ParticleCloud(p)), np.zeros((1, 1)))[0]
    e = np.zeros(3)
    e[j] = h
    fd = (f(pts + e) - f(pts - e)) / (2 * h) * len(pts)
    an = measure_derivative_hamiltonian(lq, 0.5, 0.0, x, MeasureView.of_cloud(ParticleCloud(pts)),
                                        [0.0], [[0.0]], [0.0], [pts[j]])[0]
    assert fd == pytest.approx(an, rel=1e-6)


def test_argmin_examples():
    lq = LinearQuadraticSpec(b3=1.0, **{"lambda": 1.0})
    grid = np.arange(-10, 10, 1e-4)
    vals = [hamiltonian(lq, 0.5, 0.0, [0.0], MU, [2.0], [[0.0]], [a]) for a in grid[::100]]
    brute = grid[::100][int(np.argmin(vals))]
    assert argmin_hamiltonian(lq, 0.5, 0.0, [0.0], MU, [2.0], [[0.0]])[0] == pytest.approx(-1.0)
    assert abs(brute + 1.0) <= 1e-2
    assert argmin_hamiltonian(lq, 0.5, 0.0, [0.0], MU, [0.0], [[0.0]])[0] == 0.0
    lq2 = LinearQuadraticSpec((2, 1, 2), b3=[[1, 0], [0, 0]], **{"lambda": 1.0})
    got = argmin_hamiltonian(lq2, 0.5, 0.0, [0.0, 0.0], MeasureView.dirac([0.0, 0.0]), [2.0, 4.0], [[0.0], [0.0]])
    assert np.allclose(got, [-1.0, 0.0])


def test_newton_agrees_with_closed_form():
    lq = lq_random()
    rng = np.random.default_rng(2)
    x, y, z = rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.standard_normal((5, 2, 2))
    u = np.linspace(0.1, 0.9, 5)
    mu = MeasureView.dirac([0.1, 0.3])
    a1 = argmin_hamiltonian(lq, u, 0.0, x, mu, y, z)
    a2 = argmin_hamiltonian(lq, u, 0.0, x, mu, y, z, method="newton")
    assert np.allclose(a1, a2, atol=1e-8)


def test_validate_passes_and_fails():
    assert validate_model(reference("lq-scalar").model, probes=100)["pass"]
    bad = LinearQuadraticSpec(b3=1.0, **{"lambda": -1.0})
    report = validate_model(bad, probes=50)
    assert not report["pass"]
    assert "Assumption 5.2(3)" in {c["assumption"] for c in report["checks"] if not c["pass"]}


def test_validate_flags_undeclared_growth():
    quartic = FunctionalModel(
        (1, 1, 1), b=lambda u, t, x, mu, a: a.copy(), sigma=lambda u, t, x, mu, a: np.ones((len(x), 1, 1)),
        f=lambda u, t, x, mu, a: x[:, 0] ** 4 + a[:, 0] ** 2, g=lambda u, x, mu: np.zeros(len(x)),
        dx_f=lambda u, t, x, mu, a: 4 * x ** 3, dx_g=lambda u, x, mu: np.zeros_like(x),
        da_f=lambda u, t, x, mu, a: 2 * a, da_b=lambda u, t, x, mu, a: np.ones((len(x), 1, 1)),
        lipschitz={"f": 10.0}, probe_range=10.0, convexity=1.0)
    report = validate_model(quartic, probes=100)
    lip = [c for c in report["checks"] if c["check"] == "lipschitz_f"][0]
    assert not lip["pass"] and lip["empirical_ratio"] > 10.0


@pytest.mark.parametrize("name", ["lq-scalar", "lq-2block", "convex-nonlq", "lq-hetero"])
def test_builtin_derivatives_match_fd(name):
    report = validate_model(reference(name).model, probes=100)
    fd = [c for c in report["checks"] if c["check"] == "derivative_fd_consistency"][0]
    assert fd["pass"]


def test_lq_json_roundtrip(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"dims": [1, 1, 1], "b1": -0.5, "b3": 1, "s0": 0.5, "q": {"label_blocks": [1, 2]},'
                 ' "lambda": 0.5, "initial": {"mean": 1.0, "std": 0.5}}')
    lq = LinearQuadraticSpec.from_json(p)
    assert lq.name == "m"
    assert np.allclose(lq.c("q", np.array([0.2, 0.8]), 0.0), [1, 2])
    with pytest.raises(ValueError):
        LinearQuadraticSpec.from_json({"bogus": 1})
