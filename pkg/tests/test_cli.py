import json

import pytest

from derevm.cli import main


def test_simulate_prints_intermediate_estimates(capsys):
    assert main(["simulate", "--seed", "1", "--paths", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    for key in ("truth", "theta_hat", "zeta_hat", "permutation", "estimate", "iterations", "nmse"):
        assert key in out
    assert len(out["theta_hat"]) == 2


def test_sweep_requires_seed(tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep", "--scenario", "snr_sweep", "--out", str(tmp_path)])


def test_sweep_with_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "pilot_sweep", "n_paths": 1, "trials": 1, "pilots": [8], "snapshots": 100}))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "4"]) == 0
    csv_path, man_path = capsys.readouterr().out.split()
    assert csv_path.endswith(".csv") and man_path.endswith(".manifest.json")
    # the manifest is itself a valid config
    assert main(["sweep", "--config", man_path, "--out", str(tmp_path / "o2"), "--seed", "4"]) == 0


def test_sweep_rejects_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "pilot_sweep", "typo": 1}))
    with pytest.raises(ValueError):
        main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1"])


def test_verify_subset(capsys):
    assert main(["verify", "--only", "rayleigh", "vbi"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(l.startswith("[PASS]") for l in lines)
