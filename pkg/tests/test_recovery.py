import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derevm import make_pathset, nmse, to_db
from derevm.recovery import (
    angular_index_correction,
    hungarian_assignment,
    misassigned_paths,
    pairing_resolved,
    permutation_costs,
    recover_phi,
)


@settings(max_examples=40, deadline=None)
@given(
    p=st.lists(st.floats(0.01, 10.0), min_size=1, max_size=5, unique=True),
    seed=st.integers(0, 10_000),
)
def test_aic_undoes_a_permutation(p, seed):
    p = np.array(p)
    perm = np.random.default_rng(seed).permutation(p.size)
    # zeta block k carries power p[inv[k]]
    e_zeta = p[np.argsort(perm)]
    got = angular_index_correction(p, e_zeta)
    np.testing.assert_array_equal(e_zeta[got], p)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(1, 5))
def test_aic_is_optimal_and_agrees_with_hungarian(seed, L):
    rng = np.random.default_rng(seed)
    et, ez = rng.uniform(0, 1, L), rng.uniform(0, 1, L)
    perm, cost = angular_index_correction(et, ez, return_cost=True)
    costs = permutation_costs(et, ez)
    assert cost == pytest.approx(min(costs.values()))
    h = hungarian_assignment(et, ez)
    assert costs[tuple(h)] == pytest.approx(cost)


def test_aic_tie_goes_to_the_larger_evidenced_power():
    # wrong pairings match with both evidences zero
    Et = np.array([[1.0, 0.0], [0.0, 0.0]])
    Ez = np.array([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(angular_index_correction(Et, Ez), [0, 1])
    Et2 = np.array([[0.0, 1.0], [0.0, 0.0]])
    Ez2 = np.array([[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(angular_index_correction(Et2, Ez2), [1, 0])


def test_aic_rejects_mismatched_sizes():
    with pytest.raises(ValueError):
        angular_index_correction(np.ones((2, 3)), np.ones((2, 3)))


def test_recover_phi_round_trip_and_clipping():
    th = np.array([0.7, 1.4, 2.2])
    ph = np.array([-0.4, 0.1, 0.9])
    z = np.arcsin(np.sin(th) * np.sin(ph))
    np.testing.assert_allclose(recover_phi(th, z), ph, atol=1e-12)
    d = recover_phi([0.3], [1.2], return_diagnostics=True)
    assert d.n_clipped == 1 and d.phi[0] == pytest.approx(np.pi / 2)


def test_nmse_and_db():
    R = np.eye(3)
    assert nmse(R, R) == 0.0
    assert nmse(0.9 * R, R) == pytest.approx(0.01)
    assert to_db(0.01) == pytest.approx(-20.0)


def test_misassignment_and_resolution(desk):
    ps = make_pathset(desk, [0.8, 1.6, 2.3], [0.3, -0.5, 0.1], [5.0, 5.0, 5.0])
    th, z = ps.theta, ps.zeta
    assert misassigned_paths(th, z, ps) == 0
    assert misassigned_paths(th, z[[1, 0, 2]], ps) == 2
    assert pairing_resolved(th, z, ps)
    assert not pairing_resolved(th[[0, 0, 2]], z, ps)
    assert not pairing_resolved(th + 0.1, z, ps)
