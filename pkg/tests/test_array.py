import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derevm import UpaConfig, array_response, generate_snapshots, make_pathset, sample_pathset, true_covariance
from derevm.array import SPEED_OF_LIGHT, extra_distance_exact, extra_distance_fresnel, rayleigh_bounds


def test_rayleigh_distance_full_scale_at_30ghz():
    cfg = UpaConfig.full_scale(wavelength=SPEED_OF_LIGHT / 30e9)
    assert cfg.rayleigh_upper == pytest.approx(26.0, abs=0.5)


def test_rayleigh_bounds_ordered(desk):
    lo, hi = rayleigh_bounds(desk)
    assert 0 < lo < hi


def test_array_response_unit_modulus(desk):
    a = array_response(desk, 1.1, 0.3, 4.0)
    assert a.size == desk.n_elements
    np.testing.assert_allclose(np.abs(a), 1.0)


@settings(max_examples=40, deadline=None)
@given(
    theta=st.floats(0.05, np.pi - 0.05),
    phi=st.floats(-1.4, 1.4),
    scale=st.floats(3.0, 50.0),
)
def test_fresnel_error_shrinks_with_distance(theta, phi, scale):
    cfg = UpaConfig.desk()
    ny, nz = (v.ravel() for v in cfg.index_grid())
    r = scale * cfg.rayleigh_upper
    e = np.abs(extra_distance_exact(cfg, theta, phi, r, ny, nz) - extra_distance_fresnel(cfg, theta, phi, r, ny, nz))
    assert e.max() < cfg.wavelength / 16


def test_far_field_limit_is_planar(desk):
    near = array_response(desk, 0.9, 0.2, 1e7)
    plane = array_response(desk, 0.9, 0.2, np.inf)
    np.testing.assert_allclose(near, plane, atol=1e-3)


def test_sample_covariance_approaches_truth(desk):
    ps = sample_pathset(desk, 2, 3)
    R = true_covariance(desk, ps)
    rng = np.random.default_rng(0)
    batch = generate_snapshots(desk, ps, 4000, rng, noise_var=0.0)
    H = batch.snapshots
    R_hat = H.T @ H.conj() / batch.T
    assert np.linalg.norm(R_hat - R) / np.linalg.norm(R) < 0.1


def test_make_pathset_los_first(desk):
    ps = make_pathset(desk, [1.0, 1.5], [0.1, -0.2], [5.0, 8.0])
    assert ps.is_los[0] and not ps.is_los[1]
    assert ps.power[1] < ps.power[0]


def test_small_element_gain_vs_quadrature():
    from derevm.array import channel_power_gain

    cfg = UpaConfig.desk()
    rel = []
    for k in (100, 300, 1000):
        r = k * cfg.delta
        a = channel_power_gain(cfg, 1.0, 0.3, r)
        b = channel_power_gain(cfg, 1.0, 0.3, r, exact=True)
        rel.append(abs(a - b) / b)
    # the approximation error is physical and falls as (size / r)^2
    assert rel[0] < 5e-6
    assert rel[1] < 1e-6 and rel[2] < 1e-7
    assert rel[0] / rel[2] == pytest.approx(100, rel=0.05)
