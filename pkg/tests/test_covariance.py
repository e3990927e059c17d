import numpy as np
import pytest

from derevm import build_covariance_set, generate_snapshots, sample_pathset
from derevm.covariance import build_w_phi, build_w_r, build_w_theta


def test_angle_blocks_do_not_depend_on_distance(desk):
    ps = sample_pathset(desk, 3, 11)
    far = ps.with_(r=3 * ps.r)
    np.testing.assert_array_equal(build_w_theta(desk, ps), build_w_theta(desk, far))
    np.testing.assert_array_equal(build_w_phi(desk, ps), build_w_phi(desk, far))
    w = build_w_r(desk, ps)
    assert np.linalg.norm(w - build_w_r(desk, far)) > 1e-3 * np.linalg.norm(w)


def test_sample_blocks_converge_to_analytic(desk):
    # the closed forms assume Fresnel responses
    ps = sample_pathset(desk, 2, 5)
    a = build_covariance_set(desk, ps)
    batch = generate_snapshots(desk, ps, 20000, np.random.default_rng(2), noise_var=0.0, mode="fresnel")
    b = build_covariance_set(desk, batch)
    for name in ("w_theta", "w_phi", "w_r"):
        x, y = getattr(a, name), getattr(b, name)
        assert np.linalg.norm(x - y) / np.linalg.norm(x) < 0.01


def test_exact_responses_match_far_from_the_array(desk):
    ps = sample_pathset(desk, 2, 5)
    ps = ps.with_(r=20 * ps.r)
    a = build_covariance_set(desk, ps)
    b = build_covariance_set(desk, generate_snapshots(desk, ps, 5000, np.random.default_rng(2)))
    for name in ("w_theta", "w_phi", "w_r"):
        x, y = getattr(a, name), getattr(b, name)
        assert np.linalg.norm(x - y) / np.linalg.norm(x) < 0.01


def test_theta_block_is_sum_of_cosines(desk):
    ps = sample_pathset(desk, 1, 8)
    W = build_w_theta(desk, ps)
    # one path: every line is a scaled exp(j pi n_z cos theta)
    v = np.exp(1j * np.pi * desk.z_indices * np.cos(ps.theta[0]))
    row = W[np.argmax(np.abs(W).sum(axis=1))]
    c = np.vdot(v, row) / np.vdot(v, v)
    np.testing.assert_allclose(row, c * v, atol=1e-9 * np.abs(row).max())


def test_distance_slice_chirp_rate_by_phase_fit(desk):
    from derevm import make_pathset

    ps = make_pathset(desk, [1.2], [0.35], [0.3])
    w = build_w_r(desk, ps)
    n = desk.y_indices.astype(float)
    sz = np.sin(ps.theta[0]) * np.sin(ps.phi[0])
    # remove the known linear term, then fit a parabola to the unwrapped phase
    ph = np.unwrap(np.angle(w * np.exp(1j * np.pi / 2 * n * sz)))
    c2 = np.polyfit(n, ph, 2)[0]
    assert c2 == pytest.approx(np.pi * desk.wavelength * (1 - sz**2) / (16 * 0.3), rel=1e-9)


def test_distance_column_matches_the_slice(desk):
    from derevm import make_pathset
    from derevm.grids import dictionary_r, make_distance_grid

    ps = make_pathset(desk, [1.2], [0.35], [0.3])
    sz = np.sin(ps.theta[0]) * np.sin(ps.phi[0])
    g = make_distance_grid(desk, g=sz)
    k = 1
    offsets = np.zeros(g.count)
    offsets[k] = (1 - sz**2) / 0.3 - g.coords[k]
    col = dictionary_r(desk, g, offsets, ps.theta[0], ps.phi[0])[:, k]
    w = build_w_r(desk, ps)
    np.testing.assert_allclose(w / w[desk.y_indices == 0], col, atol=1e-9)
