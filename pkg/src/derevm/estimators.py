"""Estimator front-ends with a scikit-learn style interface.

``SparseOffGridVBI`` solves one compressed-sensing problem; ``DeReVM`` runs the
full pipeline: ``theta`` and ``zeta`` problems, angular index correction,
elevation recovery, one distance problem over all paths, and the covariance
reconstruction.
"""
from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_generator, check_positive
from .array import (
    PathSet,
    SnapshotBatch,
    UpaConfig,
    form_observation_from_snapshots,
)
from .covariance import CovarianceSet, build_covariance_set
from .grids import CsProblem, _covariance_lines, b_variance, default_model, draw_measurements
from .recovery import (
    DimensionEstimate,
    angular_index_correction,
    build_pathset,
    nmse,
    power_evidence_matrix,
    reconstruct_R,
)
from .vbi import (
    LayeredPrior,
    SolverConfig,
    _converged,
    _cycled,
    _profile_fit,
    _update_mask,
    finalize,
    iterate_dere_vm,
    run_dere_vm,
)

_SNAPSHOT_DIMENSION = {"theta": "theta", "zeta": "phi", "r": "r"}


def _solver_config(est) -> SolverConfig:
    return SolverConfig(
        r_max=est.max_iter,
        eps_mu=est.tol,
        eps_sigma=est.tol,
        dynamic_range_db=est.dynamic_range_db,
        gate_support=est.gate_support,
    )


def _prior(est) -> LayeredPrior:
    if est.chain == "iid":
        return LayeredPrior.iid()
    if est.chain == "markov":
        return LayeredPrior.from_sparsity(est.sparsity, est.p10)
    raise ValueError("chain must be 'markov' or 'iid'")


class SparseOffGridVBI(BaseEstimator):
    """Off-grid sparse Bayesian recovery of one :class:`~derevm.grids.CsProblem`.

    Parameters
    ----------
    n_active : int or None
        Number of active grid blocks (known path count).  ``None`` keeps every
        block with positive support log-odds.
    chain : {"markov", "iid"}
        Support prior.  ``"iid"`` uses ``p01 = p10 = 0.5``.
    """

    def __init__(
        self,
        n_active=None,
        chain="markov",
        sparsity=0.06,
        p10=0.8,
        max_iter=50,
        tol=1e-4,
        dynamic_range_db=60.0,
        gate_support=True,
    ):
        self.n_active = n_active
        self.chain = chain
        self.sparsity = sparsity
        self.p10 = p10
        self.max_iter = max_iter
        self.tol = tol
        self.dynamic_range_db = dynamic_range_db
        self.gate_support = gate_support

    def fit(self, problem: CsProblem, y=None):
        if not isinstance(problem, CsProblem):
            raise TypeError("fit expects a CsProblem")
        res = run_dere_vm(problem, _prior(self), _solver_config(self), self.n_active)
        self.result_ = res
        self.support_ = np.asarray(res.support, int)
        self.offsets_ = res.offsets
        self.coef_ = res.mu
        self.coef_covariance_ = res.sigma
        self.support_posterior_ = res.nu
        self.values_ = problem.model.values(res.offsets)[self.support_]
        self.noise_precision_ = res.state.kappa / res.state.scale**2
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        self.history_ = [h[:2] for h in res.state.history]
        self.estimate_ = DimensionEstimate.from_result(problem, res)
        return self

    def predict(self, problem: CsProblem) -> np.ndarray:
        """Noise-free observations ``B Psi mu`` per line."""
        check_is_fitted(self, "coef_")
        A = problem.model.measurement @ problem.model.dictionary(self.offsets_)
        return np.einsum("lmk,lk->lm", A, self.coef_)


def _iteration_estimate(problem: CsProblem, state, n_active) -> DimensionEstimate:
    cols = np.flatnonzero(_update_mask(state, n_active, None))
    u = _profile_fit(state, problem, state.offsets, cols)[2] * state.scale
    values = problem.model.values(state.offsets)[cols]
    return DimensionEstimate(problem.dimension, cols, state.offsets[cols], values, u, np.asarray(problem.lines))


class DeReVM(BaseEstimator):
    """Decomposition-based channel covariance estimator.

    ``fit`` accepts a :class:`SnapshotBatch` (sample covariances), a
    :class:`CovarianceSet`, or a :class:`PathSet` (analytic covariances).

    Parameters
    ----------
    n_paths : int
        Number of paths ``L``.
    cfg : UpaConfig, optional
        Array geometry; defaults to the desk-scale array.
    aic : bool
        Pair ``theta`` and ``zeta`` blocks by angular index correction; when
        off the blocks are paired in grid order.
    far_field : bool
        Skip the distance problem and reconstruct with planar responses.
    chain : {"markov", "iid"}
        Support prior of every dimension.
    random_state : int or None
        Seed of the compressive measurement matrices.
    perturbation : Perturbation, optional
        Error on the snapshot-to-observation map (snapshot input only).

    Attributes
    ----------
    pathset_ : PathSet
        Estimated paths (``power`` holds the estimated path powers).
    covariance_ : FactoredCovariance
        Reconstructed ``E{h h^H}``.
    permutation_ : ndarray
        ``zeta`` block paired with each ``theta`` block.
    n_iter_ : int
        Largest outer-iteration count over the solved dimensions.
    """

    def __init__(
        self,
        n_paths=1,
        cfg=None,
        aic=True,
        far_field=False,
        chain="markov",
        sparsity=0.06,
        p10=0.8,
        max_iter=50,
        tol=1e-4,
        dynamic_range_db=60.0,
        gate_support=True,
        b_convention="variance",
        r_slices=None,
        beta_delta=1.2,
        response_mode="exact",
        random_state=None,
        perturbation=None,
        track_history=False,
    ):
        self.n_paths = n_paths
        self.cfg = cfg
        self.aic = aic
        self.far_field = far_field
        self.chain = chain
        self.sparsity = sparsity
        self.p10 = p10
        self.max_iter = max_iter
        self.tol = tol
        self.dynamic_range_db = dynamic_range_db
        self.gate_support = gate_support
        self.b_convention = b_convention
        self.r_slices = r_slices
        self.beta_delta = beta_delta
        self.response_mode = response_mode
        self.random_state = random_state
        self.perturbation = perturbation
        self.track_history = track_history

    # -- problem assembly ---------------------------------------------------

    def _config(self, X) -> UpaConfig:
        if self.cfg is not None:
            return self.cfg
        if isinstance(X, SnapshotBatch):
            return X.cfg
        if isinstance(X, CovarianceSet):
            ny, nz = X.shape
            return UpaConfig.desk().replace(n_y=ny, n_z=nz)
        return UpaConfig.desk()

    def _problem(self, dimension, cfg, source, B, **r_kw) -> CsProblem:
        lines = cfg.y_indices if dimension == "theta" else cfg.z_indices if dimension == "zeta" else self._slices(cfg)
        if isinstance(source, SnapshotBatch):
            dim = _SNAPSHOT_DIMENSION[dimension]
            pert = self.perturbation
            rng = self._rng if pert is None or pert.seed is None else as_generator(pert.seed)
            Y = np.stack([form_observation_from_snapshots(source, dim, int(n), B[i], pert, rng) for i, n in enumerate(lines)])
            truth = None
        else:
            W, lines = _covariance_lines(source, cfg, dimension, self._slices(cfg))
            Y = np.einsum("lmn,ln->lm", B, W)
            truth = W
        if dimension == "r":
            r_kw["slices"] = lines
        model = default_model(cfg, dimension, B, **r_kw)
        return CsProblem(Y, model, np.asarray(lines), truth=truth)

    def _slices(self, cfg):
        return np.asarray(cfg.z_indices if self.r_slices is None else self.r_slices, int)

    def _measurements(self, cfg, dimension, rng):
        n_lines = {"theta": cfg.n_y, "zeta": cfg.n_z, "r": len(self._slices(cfg))}[dimension]
        length = cfg.n_z if dimension == "theta" else cfg.n_y
        return draw_measurements(rng, n_lines, cfg.n_rf, length, b_variance(cfg, self.b_convention))

    # -- fitting --------------------------------------------------------------

    def fit(self, X, y=None, angles_from=None):
        """Estimate the paths and the channel covariance from ``X``.

        ``angles_from`` is a fitted :class:`DeReVM` on the same data, seed and
        support prior whose ``theta`` and ``zeta`` solutions are reused; only
        the pairing, distance and reconstruction stages run again.
        """
        L = int(self.n_paths)
        if L < 1:
            raise ValueError("n_paths must be at least 1")
        check_positive(self.tol, "tol")
        cfg = self._config(X)
        if isinstance(X, PathSet):
            source = build_covariance_set(cfg, X)
        elif isinstance(X, (CovarianceSet, SnapshotBatch)):
            source = X
        else:
            raise TypeError("fit expects a SnapshotBatch, CovarianceSet or PathSet")
        if isinstance(source, SnapshotBatch) and self.perturbation is None:
            # same observations as the per-line map, computed in one pass
            source = build_covariance_set(cfg, source)
        prior = _prior(self)
        scfg = _solver_config(self)
        t0 = time.perf_counter()
        if angles_from is not None:
            check_is_fitted(angles_from, "theta_result_")
            if angles_from.n_paths != L or angles_from.chain != self.chain:
                raise ValueError("angles_from must share n_paths and the support prior")
            B, rng = angles_from._B, angles_from._rng
            rt, rz = angles_from.theta_result_, angles_from.zeta_result_
            et, ez = angles_from.theta_estimate_, angles_from.zeta_estimate_
            hist_t, hist_z = getattr(angles_from, "_hist", ([], []))
        else:
            rng = as_generator(self.random_state)
            B = {d: self._measurements(cfg, d, rng) for d in ("theta", "zeta", "r")}
        self.cfg_ = cfg
        self._source = source
        self._B = B
        self._rng = rng
        if angles_from is None:
            pt = self._problem("theta", cfg, source, B["theta"])
            pz = self._problem("zeta", cfg, source, B["zeta"])
            if self.track_history:
                rt, hist_t = self._solve_tracked(pt, prior, scfg, L)
                rz, hist_z = self._solve_tracked(pz, prior, scfg, L)
            else:
                rt = run_dere_vm(pt, prior, scfg, L)
                rz = run_dere_vm(pz, prior, scfg, L)
                hist_t, hist_z = [], []
            et = DimensionEstimate.from_result(pt, rt)
            ez = DimensionEstimate.from_result(pz, rz)
        self._hist = (hist_t, hist_z)
        self._angle_wall_ms = (time.perf_counter() - t0) * 1e3
        out = self._assemble(cfg, source, et, ez, prior, scfg)
        self.theta_result_, self.zeta_result_ = rt, rz
        self.theta_estimate_, self.zeta_estimate_ = et, ez
        self.pathset_ = out["pathset"]
        self.permutation_ = out["perm"]
        self.evidence_ = out["evidence"]
        self.phi_clipped_ = out["phi"].clipped
        self.zeta_hat_ = out["zeta"]
        self.r_result_ = out["r_result"]
        self.covariance_ = reconstruct_R(self.pathset_, cfg, mode=self._mode())
        self.n_iter_ = max(rt.n_iter, rz.n_iter, 0 if out["r_result"] is None else out["r_result"].n_iter)
        self.converged_ = bool(rt.converged and rz.converged and (out["r_result"] is None or out["r_result"].converged))
        if self.track_history:
            if not hist_t or not hist_z:
                raise ValueError("track_history needs angles_from fitted with track_history")
            self.history_ = self._history(cfg, source, hist_t + [et], hist_z + [ez], prior, scfg)
        return self

    def _mode(self):
        return "planar" if self.far_field else self.response_mode

    def _solve_tracked(self, problem, prior, scfg, L):
        snaps, state = [], None
        for state in iterate_dere_vm(problem, prior, scfg, L):
            snaps.append(_iteration_estimate(problem, state, L))
            if _converged(state, scfg) or _cycled(state, problem):
                break
        return finalize(problem, state, L, scfg, prior), snaps

    def _assemble(self, cfg, source, et, ez, prior, scfg):
        L = min(len(et), len(ez))
        Et, Ez = power_evidence_matrix(et, ez)
        if self.aic:
            perm = angular_index_correction(Et, Ez)
        else:
            perm = np.arange(L)
        q = np.arange(L)
        pair = np.vstack([Et[q, perm], Ez[q, perm]])
        with np.errstate(invalid="ignore"):
            weight = np.where(np.all(np.isnan(pair), axis=0), 0.0, np.nanmean(np.where(np.isnan(pair), np.nan, pair), axis=0))
        power = L * np.maximum(np.nan_to_num(weight), 0.0)
        theta_hat = et.values[:L]
        zeta_hat = ez.values[perm]
        r_result = None
        if self.far_field:
            r_hat = np.full(L, np.inf)
        else:
            pr = self._problem("r", cfg, source, self._B["r"], zeta_hat=zeta_hat, theta_hat=theta_hat, beta_delta=self.beta_delta)
            r_result = run_dere_vm(pr, prior, scfg, L)
            dist = pr.model.distances(r_result.offsets)
            # one active column per path segment
            # active_set returns one column per path segment, in segment order
            r_hat = dist[np.asarray(r_result.support, int)]
        ps, phi = build_pathset(theta_hat, zeta_hat, r_hat, power)
        return dict(pathset=ps, perm=perm, evidence=(Et, Ez), phi=phi, r_result=r_result, zeta=zeta_hat)

    def _history(self, cfg, source, hist_t, hist_z, prior, scfg):
        n = max(len(hist_t), len(hist_z))
        out = []
        for k in range(n):
            et = hist_t[min(k, len(hist_t) - 1)]
            ez = hist_z[min(k, len(hist_z) - 1)]
            out.append(self._assemble(cfg, source, et, ez, prior, scfg)["pathset"])
        return out

    # -- outputs ---------------------------------------------------------------

    def covariance(self, dense: bool = False):
        check_is_fitted(self, "covariance_")
        return self.covariance_.dense() if dense else self.covariance_

    def nmse(self, truth: PathSet, mode: str = "exact") -> float:
        """NMSE of the reconstructed covariance against the true paths."""
        check_is_fitted(self, "covariance_")
        return nmse(self.covariance_, reconstruct_R(truth, self.cfg_, mode=mode))

    def nmse_history(self, truth: PathSet, mode: str = "exact") -> np.ndarray:
        check_is_fitted(self, "history_")
        R = reconstruct_R(truth, self.cfg_, mode=mode)
        return np.array([nmse(reconstruct_R(ps, self.cfg_, mode=self._mode()), R) for ps in self.history_])

    def score(self, X, y=None) -> float:
        """Negative NMSE against the true paths ``X``."""
        return -self.nmse(X)


def scheme_estimator(scheme: str, n_paths: int, cfg: UpaConfig | None = None, **kw) -> DeReVM:
    """Estimator of a named scheme.

    ``dere_vm`` is the full pipeline; ``dere_vbi`` swaps the Markov support
    prior for an i.i.d. one; ``without_aic`` pairs blocks in grid order;
    ``offgrid_angular`` solves only the angles and reconstructs with planar
    responses.
    """
    opts = dict(n_paths=n_paths, cfg=cfg)
    if scheme == "dere_vm":
        pass
    elif scheme == "dere_vbi":
        opts["chain"] = "iid"
    elif scheme == "without_aic":
        opts["aic"] = False
    elif scheme == "offgrid_angular":
        opts["far_field"] = True
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    opts.update(kw)
    return DeReVM(**opts)


SCHEMES = ("dere_vm", "dere_vbi", "without_aic", "offgrid_angular")


__all__ = ["SparseOffGridVBI", "DeReVM", "scheme_estimator", "SCHEMES"]
