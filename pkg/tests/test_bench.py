import csv
import json

import numpy as np
import pytest

from derevm.bench import (
    CSV_HEADER,
    ExperimentConfig,
    aggregate,
    iterations_to_converge,
    read_csv,
    run_experiment,
    worker_count,
    write_outputs,
)


def small(**kw):
    d = dict(scenario="snr_sweep", schemes=["dere_vm", "without_aic"], n_paths=2, trials=2, snr_db=[0.0, 20.0], snapshots=200)
    d.update(kw)
    return ExperimentConfig(**d)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"scenario": "snr_sweep", "snr": [1]})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scenario": "snr_sweep", "array": {"n_yy": 3}}))
    with pytest.raises(ValueError, match="unknown array keys"):
        ExperimentConfig.from_json(p)


@pytest.mark.parametrize(
    "bad",
    [dict(scenario="nope"), dict(schemes=["magic"]), dict(trials=0), dict(covariance_mode="x"), dict(snr_db=[])],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        small(**bad)


def test_seed_is_required():
    with pytest.raises(ValueError):
        run_experiment(small(), seed=None, workers=1)


def test_csv_header_and_manifest(tmp_path):
    man, rows = run_experiment(small(), seed=3, workers=1)
    csv_path, man_path = write_outputs(man, rows, tmp_path)
    with open(csv_path) as fh:
        header = next(csv.reader(fh))
    assert header == list(CSV_HEADER)
    assert header == "scenario,scheme,sweep_var,sweep_value,trial,seed,nmse,iters,wall_ms".split(",")
    got = read_csv(csv_path)
    assert len(got) == 2 * 2 * 2
    np.testing.assert_array_equal([r["nmse"] for r in got], [r["nmse"] for r in rows])
    m = json.loads(man_path.read_text())
    assert m["content_hash"] == man.content_hash and m["seed"] == 3
    assert {p["sweep_value"] for p in m["points"]} == {0.0, 20.0}


def _key(rows):
    return [(r["scheme"], r["sweep_value"], r["trial"], r["nmse"], r["iters"]) for r in rows]


def test_reproducible_and_independent_of_workers():
    cfg = small()
    _, a = run_experiment(cfg, seed=11, workers=1)
    _, b = run_experiment(cfg, seed=11, workers=1)
    _, c = run_experiment(cfg, seed=11, workers=2)
    assert _key(a) == _key(b) == _key(c)
    _, d = run_experiment(cfg, seed=12, workers=1)
    assert _key(a) != _key(d)


def test_manifest_reruns_to_identical_rows(tmp_path):
    man, rows = run_experiment(small(trials=1), seed=5, workers=1)
    _, man_path = write_outputs(man, rows, tmp_path)
    cfg = ExperimentConfig.from_json(man_path)
    man2, rows2 = run_experiment(cfg, seed=man.seed, workers=1)
    assert man2.content_hash == man.content_hash
    assert _key(rows2) == _key(rows)


def test_trial_directions_shared_across_sweep_points():
    from derevm.bench import _trial_paths

    cfg = small(scenario="dist_sweep", distances=[5.0, 20.0])
    upa = cfg.upa()
    a = _trial_paths(cfg, upa, 1, 0, 3, 5.0)
    b = _trial_paths(cfg, upa, 1, 0, 3, 20.0)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.phi, b.phi)
    assert np.all(a.r == 5.0) and np.all(b.r == 20.0)


def test_error_ratio_sweep_labels():
    cfg = small(scenario="error_ratio_sweep", schemes=["dere_vm"], error_ratios=[0.0, 0.1], snapshot_counts=[50], trials=1)
    _, rows = run_experiment(cfg, seed=2, workers=1)
    assert {r["sweep_var"] for r in rows} == {"snapshots@eps=0", "snapshots@eps=0.1"}
    assert {r["sweep_value"] for r in rows} == {50}


def test_aggregate_statistics():
    rows = [dict(scheme="a", sweep_var="x", sweep_value=1, nmse=v, iters=3, wall_ms=1.0) for v in (0.1, 0.3, float("nan"))]
    (p,) = aggregate(rows)
    assert p["n"] == 2 and p["n_failed"] == 1
    assert p["nmse_mean"] == pytest.approx(0.2)
    assert p["nmse_se"] == pytest.approx(np.std([0.1, 0.3], ddof=1) / np.sqrt(2))


def test_iterations_to_converge():
    assert iterations_to_converge([1.0, 0.5, 0.2, 0.2, 0.2]) == 3
    assert iterations_to_converge([0.2]) == 1


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("DEREVM_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("DEREVM_WORKERS", "x")
    with pytest.raises(ValueError):
        worker_count()


def test_offgrid_angular_close_to_dere_vm_far_away():
    cfg = ExperimentConfig(
        scenario="dist_sweep", schemes=["dere_vm", "offgrid_angular"], trials=8, covariance_mode="analytic", distances=[40.0]
    )
    man, _ = run_experiment(cfg, seed=21, workers=1)
    db = {p["scheme"]: p["nmse_mean_db"] for p in man.points}
    assert db["offgrid_angular"] - db["dere_vm"] <= 6.0

