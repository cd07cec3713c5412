import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mlchf.estimator import IndicatorField, compute_indicators, dorfler_mark, jump_terms
from mlchf.hartree_fock import initial_guess, scf_solve


def test_indicator_field_validation():
    with pytest.raises(ValueError):
        IndicatorField(np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        IndicatorField(np.array([1.0, np.nan]))
    f = IndicatorField(np.array([1.0, 2.0, 3.0]))
    assert f.total == 6.0
    assert f.restricted([0, 2]) == 4.0


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 60), elements=st.one_of(st.just(0.0), st.floats(1e-12, 1e3))),
    st.floats(0.01, 0.99),
)
def test_dorfler_minimal_and_sufficient(values, theta):
    marked = dorfler_mark(values, theta)
    total = values.sum()
    if total == 0:
        assert marked.size == 0
        return
    assert values[marked].sum() >= theta * total * (1 - 1e-12)
    # no smaller set can reach the fraction: the k-1 largest values fall short
    top = np.sort(values)[::-1][: marked.size - 1].sum()
    assert top < theta * total
    assert len(set(marked.tolist())) == marked.size


def test_dorfler_ties_by_index():
    marked = dorfler_mark(np.array([1.0, 2.0, 2.0, 1.0]), 0.5)
    np.testing.assert_array_equal(marked, [1, 2])
    with pytest.raises(ValueError):
        dorfler_mark(np.ones(3), 1.0)


def test_jumps_vanish_for_global_linear(small_space):
    x = small_space.mesh.vertices
    u = (x @ np.array([0.2, -0.5, 1.0]))[:, None]
    assert np.abs(jump_terms(small_space, u)).max() < 1e-24


def test_indicators_on_hydrogen(small_space, hydrogen):
    from mlchf.hartree_fock import HFSystem

    system = HFSystem(small_space, hydrogen)
    orbs, pairs, _ = scf_solve(system, initial_guess(system), tol=1e-8)
    ind = compute_indicators(system, orbs, pairs)
    assert ind.values.shape == (small_space.mesh.n_tets,)
    assert ind.total > 0
    # the largest indicators sit next to the nucleus
    centroid = small_space.mesh.vertices[small_space.mesh.tets].mean(axis=1)
    top = np.argsort(ind.values)[-5:]
    assert np.linalg.norm(centroid[top], axis=1).max() < 3.0
