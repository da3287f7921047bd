import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmfc.errors import AsymmetricMatrix, DegenerateDegree, NegativeEntry
from gmfc.graphon import (Graphon, LabelGrid, l1_distance, load_graphon, min_degree_bound, mix_graphons,
                          neighborhood_weights, normalize, step_graphon_from_matrix)


@pytest.mark.parametrize("c", [0.3, 1.0, 4.0])
@pytest.mark.parametrize("M", [1, 3, 16])
def test_constant_graphon_normalizes_to_one(c, M):
    ng = normalize(Graphon.constant(c), LabelGrid(M))
    assert np.allclose(ng.rows, 1.0, atol=1e-14)


def test_product_graphon_degenerates_near_zero():
    g = Graphon.from_function(lambda u, v: u * v)
    for M in (10, 100, 1000):
        assert min_degree_bound(g, LabelGrid(M)) == pytest.approx(4 * M, rel=1e-12)
    normalize(g, LabelGrid(100), floor=1e-3)
    with pytest.raises(DegenerateDegree):
        normalize(g, LabelGrid(1000), floor=1e-3)


def test_diagonal_step_normalization():
    ng = normalize(step_graphon_from_matrix([[2, 0], [0, 2]]), LabelGrid(2))
    assert np.allclose(ng.rows, [[2, 0], [0, 2]])


@pytest.mark.parametrize("g, expected", [
    (Graphon.constant(1.0), 1.0),
    (Graphon.constant(0.5), 2.0),
    (step_graphon_from_matrix([[1, 3], [3, 1]]), 0.5),
    (step_graphon_from_matrix([[0, 1], [1, 0]]), 2.0),
])
def test_min_degree_bound(g, expected):
    assert min_degree_bound(g, LabelGrid(2)) == pytest.approx(expected)


def test_min_degree_bound_zero_row_is_infinite():
    assert min_degree_bound(step_graphon_from_matrix([[0, 0], [0, 1]]), LabelGrid(2)) == np.inf


def test_l1_distance_examples():
    grid = LabelGrid(2)
    assert l1_distance(Graphon.constant(1.0), Graphon.constant(0.5), grid) == pytest.approx(0.5)
    g = step_graphon_from_matrix([[1, 0], [0, 1]])
    assert l1_distance(g, g, grid) == 0.0
    assert l1_distance(g, Graphon.constant(1.0), grid) == pytest.approx(0.5)


def test_step_graphon_from_matrix():
    g = step_graphon_from_matrix([[1.0]])
    assert np.allclose(g.on_grid(LabelGrid(5)), 1.0)
    d = step_graphon_from_matrix([[2, 0], [0, 2]])
    assert np.allclose(d.on_grid(LabelGrid(4)), 2 * np.kron(np.eye(2), np.ones((2, 2))))
    with pytest.raises(AsymmetricMatrix):
        step_graphon_from_matrix([[1, 2], [0, 1]])
    with pytest.raises(NegativeEntry):
        step_graphon_from_matrix([[1, -1], [-1, 1]])


def test_neighborhood_weights_examples():
    assert np.allclose(neighborhood_weights(normalize(Graphon.constant(1.0), LabelGrid(4)), 2), 0.25)
    ng = normalize(step_graphon_from_matrix([[2, 0], [0, 2]]), LabelGrid(2))
    assert np.allclose(neighborhood_weights(ng, 0), [1, 0])
    ng = normalize(step_graphon_from_matrix([[1, 3], [3, 1]]), LabelGrid(2))
    assert np.allclose(neighborhood_weights(ng, 0), [0.25, 0.75])


def test_load_graphon_kinds(tmp_path):
    g = load_graphon({"kind": "step", "matrix": [[1, 0.3], [0.3, 1]]})
    assert g(0.1, 0.9) == pytest.approx(0.3)
    p = tmp_path / "g.json"
    p.write_text('{"kind": "grid", "resolution": 2, "values": [[1, 2], [2, 1]]}')
    assert load_graphon(p)(0.2, 0.7) == pytest.approx(2.0)


def test_mixture_l1_is_linear_in_s():
    grid = LabelGrid(16)
    g, h = Graphon.constant(1.0), step_graphon_from_matrix([[1.0, 0.3], [0.3, 1.0]])
    full = l1_distance(h, g, grid)
    for s in (0.0, 0.25, 0.5, 1.0):
        assert l1_distance(mix_graphons(g, h, s), g, grid) == pytest.approx(s * full, abs=1e-14)


kernels = st.integers(1, 5).flatmap(
    lambda n: st.lists(st.floats(0.01, 5.0), min_size=n * n, max_size=n * n).map(
        lambda v: np.asarray(v).reshape(n, n)))


@settings(max_examples=40, deadline=None)
@given(kernels, st.integers(1, 24))
def test_normalized_rows_have_unit_mass(raw, M):
    g = step_graphon_from_matrix(raw + raw.T)
    ng = normalize(g, LabelGrid(M))
    assert np.allclose(ng.weight_matrix.sum(axis=1), 1.0, atol=1e-12)
    for i in range(M):
        assert abs(neighborhood_weights(ng, i).sum() - 1.0) <= 1e-12
