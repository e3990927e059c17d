"""Command line: ``simulate``, ``sweep`` and ``verify``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .array import UpaConfig, generate_snapshots, sample_pathset, snapshot_noise_var
from .bench import SCENARIOS, ExperimentConfig, run_experiment, worker_count, write_outputs
from .estimators import SCHEMES, scheme_estimator
from .recovery import to_db

log = logging.getLogger("derevm")


def _pathset_dict(ps) -> dict:
    return {
        "theta": ps.theta.tolist(),
        "phi": ps.phi.tolist(),
        "r": [float(x) if np.isfinite(x) else None for x in ps.r],
        "power": ps.power.tolist(),
        "is_los": ps.is_los.tolist(),
    }


def cmd_simulate(args) -> int:
    cfg = UpaConfig.full_scale() if args.full_scale else UpaConfig.desk()
    rng = np.random.default_rng(args.seed)
    truth = sample_pathset(cfg, args.paths, rng)
    if args.snapshots:
        X = generate_snapshots(cfg, truth, args.snapshots, rng, noise_var=snapshot_noise_var(truth, args.snr_db, cfg.n_pilots))
    else:
        X = truth
    est = scheme_estimator(args.scheme, args.paths, cfg, random_state=args.seed).fit(X)
    out = {
        "scheme": args.scheme,
        "seed": args.seed,
        "mode": "sample" if args.snapshots else "analytic",
        "truth": _pathset_dict(truth),
        "theta_hat": est.theta_estimate_.values.tolist(),
        "zeta_hat": est.zeta_hat_.tolist(),
        "permutation": est.permutation_.tolist(),
        "estimate": _pathset_dict(est.pathset_),
        "phi_clipped": est.phi_clipped_.tolist(),
        "iterations": {
            "theta": est.theta_result_.n_iter,
            "zeta": est.zeta_result_.n_iter,
            "r": None if est.r_result_ is None else est.r_result_.n_iter,
        },
        "nmse": est.nmse(truth),
        "nmse_db": float(to_db(est.nmse(truth))),
    }
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
        if args.scenario and args.scenario != cfg.scenario:
            raise SystemExit(f"--scenario {args.scenario} conflicts with the config ({cfg.scenario})")
    else:
        if not args.scenario:
            raise SystemExit("either --scenario or --config is required")
        cfg = ExperimentConfig(scenario=args.scenario)
    if args.trials is not None:
        cfg.trials = args.trials
    if args.schemes:
        cfg.schemes = args.schemes
    cfg.__post_init__()
    workers = worker_count()
    log.info("running %s with %d worker(s)", cfg.scenario, workers)
    manifest, rows = run_experiment(cfg, seed=args.seed, workers=workers)
    csv_path, man_path = write_outputs(manifest, rows, args.out)
    print(f"{csv_path}\n{man_path}")
    if manifest.n_failed:
        print(f"{manifest.n_failed} failed trial(s) recorded as NaN", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    from .checks import run_checks

    results = run_checks(quick=args.quick, only=args.only)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="derevm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="one trial with intermediate estimates as JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--paths", type=int, default=3)
    s.add_argument("--scheme", choices=SCHEMES, default="dere_vm")
    s.add_argument("--snapshots", type=int, default=0, help="sample covariances from T snapshots (0: analytic)")
    s.add_argument("--snr-db", type=float, default=20.0)
    s.add_argument("--full-scale", action="store_true", help="129 x 65 array instead of 33 x 17")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="Monte Carlo campaign to CSV and manifest")
    w.add_argument("--scenario", choices=SCENARIOS)
    w.add_argument("--config", help="JSON experiment config or a previous manifest")
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, required=True)
    w.add_argument("--trials", type=int)
    w.add_argument("--schemes", nargs="+", choices=SCHEMES)
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--quick", action="store_true", help="reduced trial counts")
    v.add_argument("--only", nargs="+", help="names of the checks to run")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
