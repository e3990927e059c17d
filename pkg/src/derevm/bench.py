"""Seeded Monte Carlo campaigns over the estimator schemes.

A campaign is described by an :class:`ExperimentConfig` (JSON, unknown keys
rejected).  Every (sweep point, trial) pair draws its randomness from a
substream keyed by ``(seed, trial, purpose)``, so results do not depend on the
number of workers; the same trial index also sees the same path directions at
every sweep point.  Output is a list of CSV rows plus a manifest with
per-point means and standard errors.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import substream
from .array import (
    SPEED_OF_LIGHT,
    Perturbation,
    UpaConfig,
    generate_snapshots,
    make_pathset,
    sample_pathset,
    snapshot_noise_var,
)
from .estimators import SCHEMES, scheme_estimator
from .recovery import nmse, reconstruct_R, to_db

log = logging.getLogger(__name__)

SCENARIOS = ("convergence", "dist_sweep", "snr_sweep", "pilot_sweep", "nlos_sweep", "error_ratio_sweep")
CSV_HEADER = ("scenario", "scheme", "sweep_var", "sweep_value", "trial", "seed", "nmse", "iters", "wall_ms")
WORKERS_ENV = "DEREVM_WORKERS"

# substream purposes
_PATHS, _SNAPSHOTS, _MEASURE, _PERTURB = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    """One campaign.

    ``array`` holds :class:`UpaConfig` overrides; ``"scale": "full"`` selects
    the 129 x 65 array.  ``covariance_mode`` is ``"analytic"`` (closed-form
    covariances) or ``"sample"`` (``snapshots`` draws with pilot noise).
    """

    scenario: str
    schemes: list = field(default_factory=lambda: ["dere_vm"])
    array: dict = field(default_factory=dict)
    n_paths: int = 3
    trials: int = 100
    seed: int | None = None
    covariance_mode: str = "sample"
    snapshots: int = 1000
    snr_db: list = field(default_factory=lambda: [20.0])
    pilots: list = field(default_factory=lambda: [32])
    distances: list = field(default_factory=lambda: [5.0, 10.0, 20.0, 30.0, 40.0, 50.0])
    distance_range: list | None = None
    nlos_counts: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    error_ratios: list = field(default_factory=lambda: [0.0, 0.05, 0.2])
    snapshot_counts: list = field(default_factory=lambda: [100, 300, 1000, 3000])
    max_iter: int = 50
    tol: float = 1e-4
    carrier_hz: float | None = None  # overrides the array wavelength when set
    bandwidth_hz: float = 100e6  # recorded only; the narrowband model ignores it

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if isinstance(self.schemes, str):
            self.schemes = [self.schemes]
        self.schemes = list(self.schemes)
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ValueError(f"unknown scheme(s) {bad}; choose from {SCHEMES}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.covariance_mode not in ("analytic", "sample"):
            raise ValueError("covariance_mode must be 'analytic' or 'sample'")
        for name in ("snr_db", "pilots", "distances", "nlos_counts", "error_ratios", "snapshot_counts"):
            v = getattr(self, name)
            if v is None or len(v) == 0:
                raise ValueError(f"{name} must be a non-empty list")
            setattr(self, name, list(v))
        unknown = set(self.array) - {f.name for f in dataclasses.fields(UpaConfig)} - {"scale"}
        if unknown:
            raise ValueError(f"unknown array keys {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            d = json.load(fh)
        if "config" in d and "content_hash" in d:
            # a run manifest
            d = d["config"]
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def upa(self) -> UpaConfig:
        kw = dict(self.array)
        scale = kw.pop("scale", "desk")
        if self.carrier_hz is not None:
            kw.setdefault("wavelength", SPEED_OF_LIGHT / self.carrier_hz)
        if scale == "full":
            return UpaConfig.full_scale(**kw)
        if scale != "desk":
            raise ValueError("array scale must be 'desk' or 'full'")
        return UpaConfig.desk(**kw)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def sweep(self) -> tuple[str, list]:
        """Sweep variable and its points for the scenario."""
        if self.scenario == "convergence":
            return "iteration", [None]
        if self.scenario == "dist_sweep":
            return "distance_m", self.distances
        if self.scenario == "snr_sweep":
            return "snr_db", self.snr_db
        if self.scenario == "pilot_sweep":
            return "pilots", self.pilots
        if self.scenario == "nlos_sweep":
            return "n_nlos", self.nlos_counts
        return "snapshots", [(e, T) for e in self.error_ratios for T in self.snapshot_counts]


# ---------------------------------------------------------------------------
# one trial


def _trial_paths(cfg: ExperimentConfig, upa: UpaConfig, seed: int, trial: int, n_paths: int, distance=None):
    rng = substream(seed, trial, _PATHS)
    r_range = None
    if cfg.distance_range is not None:
        r_range = tuple(cfg.distance_range)
    ps = sample_pathset(upa, n_paths, rng, r_range=r_range)
    if distance is not None:
        # every path at the swept distance, directions unchanged
        ps = make_pathset(upa, ps.theta, ps.phi, np.full(n_paths, float(distance)), rng=substream(seed, trial, _PATHS, 1))
    return ps


def _observe(cfg: ExperimentConfig, upa: UpaConfig, ps, seed, trial, snr_db, pilots, T):
    if cfg.covariance_mode == "analytic":
        return ps
    noise = snapshot_noise_var(ps, snr_db, pilots)
    return generate_snapshots(upa, ps, T, substream(seed, trial, _SNAPSHOTS), noise_var=noise)


def _fit_schemes(cfg: ExperimentConfig, upa, X, ps, seed, trial, n_paths, perturbation=None, track=False):
    """Fit every scheme on ``X``; schemes sharing the angle solves reuse them."""
    R = reconstruct_R(ps, upa)
    out = {}
    shared = None
    for scheme in cfg.schemes:
        est = scheme_estimator(
            scheme,
            n_paths,
            upa,
            max_iter=cfg.max_iter,
            tol=cfg.tol,
            random_state=substream(seed, trial, _MEASURE).integers(2**63),
            perturbation=perturbation,
            track_history=track,
        )
        t0 = time.perf_counter()
        reuse = shared if scheme != "dere_vbi" and shared is not None else None
        est.fit(X, angles_from=reuse)
        wall = (time.perf_counter() - t0) * 1e3
        if reuse is not None:
            wall += reuse._angle_wall_ms
        if scheme != "dere_vbi" and shared is None:
            shared = est
        out[scheme] = (est, nmse(est.covariance_, R), wall)
    return out


def run_trial(cfg: ExperimentConfig, seed: int, point_index: int, value, trial: int) -> list[dict]:
    """Rows of one (sweep point, trial) pair, one per scheme (NaN on failure)."""
    upa = cfg.upa()
    sweep_var, _ = cfg.sweep()
    L = cfg.n_paths
    snr, P, T = cfg.snr_db[0], cfg.pilots[0], cfg.snapshots
    dist, pert = None, None
    sv = value
    if cfg.scenario == "dist_sweep":
        dist = value
    elif cfg.scenario == "snr_sweep":
        snr = value
    elif cfg.scenario == "pilot_sweep":
        P = int(value)
    elif cfg.scenario == "nlos_sweep":
        L = 1 + int(value)
    elif cfg.scenario == "error_ratio_sweep":
        eps, T = value
        sweep_var = f"snapshots@eps={eps:g}"
        sv = T
        pert = Perturbation(float(eps), seed=int(substream(seed, trial, _PERTURB).integers(2**63)))
    rows = []
    base = dict(scenario=cfg.scenario, sweep_var=sweep_var, trial=trial, seed=seed)
    try:
        if cfg.scenario == "nlos_sweep":
            # nested: every count adds paths to the same LoS path
            ps = _trial_paths(cfg, upa, seed, trial, 1 + max(int(n) for n in cfg.nlos_counts)).subset(np.arange(L))
        else:
            ps = _trial_paths(cfg, upa, seed, trial, L, dist)
        if cfg.scenario == "error_ratio_sweep":
            X = generate_snapshots(upa, ps, int(T), substream(seed, trial, _SNAPSHOTS), noise_var=snapshot_noise_var(ps, snr, P))
        else:
            X = _observe(cfg, upa, ps, seed, trial, snr, P, T)
        track = cfg.scenario == "convergence"
        fits = _fit_schemes(cfg, upa, X, ps, seed, trial, L, perturbation=pert, track=track)
        for scheme in cfg.schemes:
            est, err, wall = fits[scheme]
            if track:
                curve = est.nmse_history(ps)
                for k, e in enumerate(curve, start=1):
                    rows.append(dict(base, scheme=scheme, sweep_value=k, nmse=float(e), iters=est.n_iter_, wall_ms=wall))
            else:
                rows.append(dict(base, scheme=scheme, sweep_value=sv, nmse=float(err), iters=est.n_iter_, wall_ms=wall))
    except Exception as exc:  # a failed trial is recorded, not fatal
        log.warning("trial %d at %s=%s failed: %s", trial, sweep_var, sv, exc)
        for scheme in cfg.schemes:
            rows.append(dict(base, scheme=scheme, sweep_value=sv, nmse=float("nan"), iters=-1, wall_ms=float("nan")))
    return rows


def _run_task(args):
    cfg_dict, seed, point_index, value, trial = args
    return run_trial(ExperimentConfig.from_dict(cfg_dict), seed, point_index, value, trial)


def worker_count() -> int:
    v = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(v)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {v!r}") from None
    return max(n, 1)


# ---------------------------------------------------------------------------
# campaign


@dataclass
class RunManifest:
    config: dict
    content_hash: str
    seed: int
    points: list
    n_failed: int
    wall_s: float
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean NMSE, standard error and iteration statistics per (scheme, sweep point)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["scheme"], r["sweep_var"], r["sweep_value"]), []).append(r)
    out = []
    for (scheme, var, value), rs in groups.items():
        e = np.array([r["nmse"] for r in rs], float)
        ok = np.isfinite(e)
        n = int(ok.sum())
        mean = float(e[ok].mean()) if n else float("nan")
        se = float(e[ok].std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        it = np.array([r["iters"] for r in rs], float)[ok]
        out.append(
            dict(
                scheme=scheme,
                sweep_var=var,
                sweep_value=value,
                n=n,
                n_failed=int((~ok).sum()),
                nmse_mean=mean,
                nmse_se=se,
                nmse_mean_db=float(to_db(mean)) if n else float("nan"),
                nmse_median=float(np.median(e[ok])) if n else float("nan"),
                iters_mean=float(it.mean()) if n else float("nan"),
                wall_ms_mean=float(np.mean([r["wall_ms"] for r in rs if np.isfinite(r["wall_ms"])] or [np.nan])),
            )
        )
    return out


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, workers: int | None = None):
    """Run the campaign; returns ``(manifest, rows)``."""
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ValueError("a seed is required")
    cfg = dataclasses.replace(cfg, seed=int(seed))
    _, points = cfg.sweep()
    tasks = [(cfg.to_dict(), int(seed), i, v, t) for i, v in enumerate(points) for t in range(cfg.trials)]
    workers = worker_count() if workers is None else workers
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        chunks = [_run_task(t) for t in tasks]
    rows = [r for c in chunks for r in c]
    wall = time.perf_counter() - t0
    summary = aggregate(rows)
    n_failed = sum(1 for r in rows if not np.isfinite(r["nmse"]))
    manifest = RunManifest(cfg.to_dict(), cfg.content_hash(), int(seed), summary, n_failed, wall)
    return manifest, rows


def write_csv(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in CSV_HEADER})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["trial"] = int(r["trial"])
        r["seed"] = int(r["seed"])
        r["iters"] = int(r["iters"])
        for k in ("sweep_value", "nmse", "wall_ms"):
            r[k] = float(r[k])
    return rows


def write_outputs(manifest: RunManifest, rows: list[dict], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{manifest.config['scenario']}_{manifest.content_hash}"
    csv_path = out / f"{stem}.csv"
    man_path = out / f"{stem}.manifest.json"
    write_csv(rows, csv_path)
    manifest.write(man_path)
    return csv_path, man_path


def iterations_to_converge(curve, rel: float = 0.01) -> int:
    """First iteration (1-based) after which the NMSE stays within ``rel`` of its final value."""
    curve = np.asarray(curve, float)
    final = curve[-1]
    ok = np.abs(curve - final) <= rel * abs(final)
    # last index that violates the band, plus one
    bad = np.flatnonzero(~ok)
    return int(bad[-1] + 2) if bad.size else 1


__all__ = [
    "ExperimentConfig",
    "RunManifest",
    "SCENARIOS",
    "CSV_HEADER",
    "WORKERS_ENV",
    "run_trial",
    "run_experiment",
    "aggregate",
    "write_csv",
    "read_csv",
    "write_outputs",
    "worker_count",
    "iterations_to_converge",
]
