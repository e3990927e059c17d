import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derevm.checks import dictionary_coherences
from derevm.grids import (
    dictionary_r,
    dictionary_theta,
    dictionary_zeta,
    make_distance_grid,
    make_theta_grid,
    make_zeta_grid,
    mutual_coherence,
)


def test_angle_grids_uniform_in_phase():
    for g, f in ((make_theta_grid(17), np.cos), (make_zeta_grid(33), np.sin)):
        d = np.diff(f(g.points))
        np.testing.assert_allclose(d, d[0])
        assert abs(d[0]) == pytest.approx(g.spacing)


def test_on_grid_angle_dictionaries_orthogonal(desk):
    assert mutual_coherence(dictionary_theta(make_theta_grid(desk.n_z), indices=desk.z_indices)) < 1e-12
    assert mutual_coherence(dictionary_zeta(make_zeta_grid(desk.n_y), indices=desk.y_indices)) < 1e-12


def test_distance_grid_inside_region(desk):
    g = make_distance_grid(desk, g=0.3)
    pts = g.points[np.isfinite(g.points)]
    assert np.all(pts > 0)
    assert np.all(np.diff(g.coords) > 0)


def test_coherence_report_has_every_dimension():
    c = dictionary_coherences()
    assert set(c) == {"theta", "zeta", "r"}
    assert all(0 <= v <= 1 for v in c.values())


@settings(max_examples=25, deadline=None)
@given(i=st.integers(0, 16), off=st.floats(-0.02, 0.02))
def test_theta_dictionary_derivative_matches_finite_difference(i, off):
    g = make_theta_grid(17)
    idx = np.arange(-8, 9)
    o = np.zeros(17)
    o[i] = off
    _, dPsi = dictionary_theta(g, o, idx, derivative=True)
    h = 1e-6
    e = np.zeros(17)
    e[i] = h
    fd = (dictionary_theta(g, o + e, idx) - dictionary_theta(g, o - e, idx))[:, i] / (2 * h)
    np.testing.assert_allclose(dPsi[:, i], fd, atol=1e-6)


def test_distance_dictionary_derivative(desk):
    g = make_distance_grid(desk, g=0.2)
    o = np.full(g.count, 1e-3)
    _, dPsi = dictionary_r(desk, g, o, 1.2, 0.2, derivative=True)
    h = 1e-7
    fd = (dictionary_r(desk, g, o + h, 1.2, 0.2) - dictionary_r(desk, g, o - h, 1.2, 0.2)) / (2 * h)
    np.testing.assert_allclose(dPsi, fd, atol=1e-5)


def test_ring_count_floor_expression_full_scale():
    from derevm import UpaConfig
    from derevm.grids import max_distance_points, z_delta

    cfg = UpaConfig.full_scale()
    Z = 129**2 * cfg.delta / (8 * 1.2**2)
    assert z_delta(cfg) == pytest.approx(Z, rel=1e-12)
    n = max_distance_points(cfg)
    assert n == int(np.floor(Z / cfg.rayleigh_lower))
    # with the dimensionally consistent Z only a few rings fit, so the cap never binds
    assert n == 3
    g = make_distance_grid(cfg)
    assert g.count == n + 1
    assert make_distance_grid(cfg, cap=3).count == 3
    assert np.all(g.points[1:] >= cfg.rayleigh_lower * (1 - 1e-12))
    assert g.points[0] == np.inf
