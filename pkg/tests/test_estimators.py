import numpy as np
import pytest
from sklearn.base import clone

from derevm import SCHEMES, DeReVM, SparseOffGridVBI, generate_snapshots, make_pathset, scheme_estimator
from derevm.array import snapshot_noise_var
from derevm.checks import on_grid_pathset


def test_on_grid_paths_are_recovered_exactly(desk):
    for seed, L in ((1, 1), (2, 2), (3, 3)):
        ps = on_grid_pathset(desk, L, np.random.default_rng(seed))
        est = DeReVM(L, desk, random_state=seed).fit(ps)
        assert est.nmse(ps) < 1e-6


def test_single_path_pairing_is_trivial(desk):
    ps = make_pathset(desk, [1.1], [0.3], [0.4])
    a = scheme_estimator("dere_vm", 1, desk, random_state=5).fit(ps)
    b = scheme_estimator("without_aic", 1, desk, random_state=5).fit(ps)
    assert a.nmse(ps) == b.nmse(ps)
    np.testing.assert_array_equal(a.pathset_.theta, b.pathset_.theta)
    np.testing.assert_array_equal(a.pathset_.r, b.pathset_.r)


def test_schemes_differ_in_one_parameter():
    base = scheme_estimator("dere_vm", 3).get_params()
    changed = {
        s: {k for k, v in scheme_estimator(s, 3).get_params().items() if v != base[k]} for s in SCHEMES
    }
    assert changed == {"dere_vm": set(), "dere_vbi": {"chain"}, "without_aic": {"aic"}, "offgrid_angular": {"far_field"}}


def test_unknown_scheme():
    with pytest.raises(ValueError):
        scheme_estimator("nope", 2)


def test_clone_and_params():
    est = DeReVM(2, sparsity=0.1)
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert isinstance(SparseOffGridVBI().get_params(), dict)


def test_fit_is_deterministic_given_seed(desk):
    ps = make_pathset(desk, [1.0, 1.9], [0.2, -0.6], [0.5, 3.0])
    X = generate_snapshots(desk, ps, 300, np.random.default_rng(4), noise_var=snapshot_noise_var(ps, 20, 32))
    a = DeReVM(2, desk, random_state=8).fit(X)
    b = DeReVM(2, desk, random_state=8).fit(X)
    assert a.nmse(ps) == b.nmse(ps)


def test_angle_reuse_matches_a_fresh_fit(desk):
    ps = make_pathset(desk, [1.0, 1.9], [0.2, -0.6], [0.5, 3.0])
    full = DeReVM(2, desk, random_state=3).fit(ps)
    fresh = DeReVM(2, desk, random_state=3, aic=False).fit(ps)
    reused = DeReVM(2, desk, random_state=3, aic=False).fit(ps, angles_from=full)
    assert reused.nmse(ps) == pytest.approx(fresh.nmse(ps), rel=1e-9)


def test_reuse_rejects_a_different_chain(desk):
    ps = make_pathset(desk, [1.0], [0.2], [0.5])
    full = DeReVM(1, desk, random_state=3).fit(ps)
    with pytest.raises(ValueError):
        DeReVM(1, desk, random_state=3, chain="iid").fit(ps, angles_from=full)


def test_history_tracks_every_iteration(desk):
    ps = make_pathset(desk, [1.2, 2.0], [0.1, 0.4], [0.6, 2.0])
    X = generate_snapshots(desk, ps, 500, np.random.default_rng(1), noise_var=snapshot_noise_var(ps, 20, 32))
    est = DeReVM(2, desk, random_state=1, track_history=True).fit(X)
    h = est.nmse_history(ps)
    assert h.ndim == 1 and h.size >= 1 and np.all(np.isfinite(h))
    assert h[-1] == pytest.approx(est.nmse(ps), rel=1e-6)


def test_rejects_bad_path_count(desk):
    with pytest.raises(ValueError):
        DeReVM(0, desk).fit(make_pathset(desk, [1.0], [0.2], [0.5]))
