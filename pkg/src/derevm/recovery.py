"""Path recovery from per-dimension estimates: power evidence, angular index
correction, elevation recovery and covariance reconstruction.

The ``theta`` problem observes ``u^theta[n_y, q] = 2 p_q cos(pi n_y sin zeta_q)``
and the ``zeta`` problem ``u^zeta[n_z, q] = 2 p_q cos(pi n_z cos theta_q)``,
where ``p_q`` is the per-path covariance weight ``power / L``.  Dividing out
the cosine of the partner angle gives two estimates of ``p_q`` that agree
only for the correct pairing of ``theta`` and ``zeta`` blocks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .array import PathSet, UpaConfig, steering_matrix

COS_FLOOR = 1e-3
SIN_THETA_FLOOR = 1e-3
MAX_ENUMERATION = 6


@dataclass
class DimensionEstimate:
    """Active columns of one solved dimension.

    ``values`` are the continuous estimates (radians for angles, ``kappa`` for
    distance) and ``amplitudes`` the nonzero coefficients, ``lines x L``.
    """

    dimension: str
    active_indices: np.ndarray
    offsets_at_active: np.ndarray
    values: np.ndarray
    amplitudes: np.ndarray
    line_indices: np.ndarray

    def __post_init__(self):
        self.active_indices = np.asarray(self.active_indices, int)
        self.values = np.asarray(self.values, float)
        self.amplitudes = np.atleast_2d(np.asarray(self.amplitudes, complex))
        if self.amplitudes.shape[1] != self.active_indices.size:
            raise ValueError("one amplitude column per active index is required")

    def __len__(self):
        return self.active_indices.size

    @classmethod
    def from_result(cls, problem, result) -> "DimensionEstimate":
        """Collect the active set of a :class:`~derevm.vbi.VbiResult`."""
        idx = np.asarray(result.support, int)
        model = problem.model
        return cls(
            problem.dimension,
            idx,
            result.offsets[idx],
            model.values(result.offsets)[idx],
            result.mu[:, idx],
            np.asarray(problem.lines),
        )


def _ratio_mean(u, c, method="lstsq"):
    """Estimate of ``p`` from ``u = 2 p c`` over entries with ``|c| >= COS_FLOOR``.

    ``"ratio"`` averages ``u / (2 c)``; ``"lstsq"`` is the least-squares fit
    ``sum u c / (2 sum c^2)``, which down-weights lines with small cosines.
    NaN when no entry survives.
    """
    keep = np.abs(c) >= COS_FLOOR
    if not keep.any():
        return np.nan
    u, c = u[keep], c[keep]
    if method == "ratio":
        return float(np.mean(u / (2 * c)))
    if method == "lstsq":
        return float(np.sum(u * c) / (2 * np.sum(c * c)))
    raise ValueError("method must be 'lstsq' or 'ratio'")


def power_evidence_matrix(theta_est: DimensionEstimate, zeta_est: DimensionEstimate, method: str = "lstsq"):
    """Evidence for every candidate pairing.

    Returns ``(E_theta, E_zeta)``, both ``L x L`` and indexed ``[q_theta,
    q_zeta]``: ``E_theta`` divides the ``theta`` amplitudes by the cosine of
    ``zeta`` block ``q_zeta`` and ``E_zeta`` the other way round.  ``method``
    selects the per-line combination (see :func:`_ratio_mean`).
    """
    Lt, Lz = len(theta_est), len(zeta_est)
    ut = np.real(theta_est.amplitudes)
    uz = np.real(zeta_est.amplitudes)
    ny = theta_est.line_indices.astype(float)
    nz = zeta_est.line_indices.astype(float)
    Et = np.empty((Lt, Lz))
    Ez = np.empty((Lt, Lz))
    for q in range(Lt):
        cz = np.cos(np.pi * nz * np.cos(theta_est.values[q]))
        for k in range(Lz):
            ct = np.cos(np.pi * ny * np.sin(zeta_est.values[k]))
            Et[q, k] = _ratio_mean(ut[:, q], ct, method)
            Ez[q, k] = _ratio_mean(uz[:, k], cz, method)
    return Et, Ez


def power_evidence(theta_est: DimensionEstimate, zeta_est: DimensionEstimate, permutation=None, method: str = "lstsq"):
    """Evidence vectors ``(e_theta, e_zeta)`` under one pairing.

    ``permutation[q]`` is the ``zeta`` block paired with ``theta`` block ``q``
    (identity by default).
    """
    Et, Ez = power_evidence_matrix(theta_est, zeta_est, method)
    perm = np.arange(len(theta_est)) if permutation is None else np.asarray(permutation)
    q = np.arange(perm.size)
    return Et[q, perm], Ez[q, perm]


def assignment_cost(e_theta, e_zeta) -> np.ndarray:
    """``L x L`` squared mismatch.

    Vectors give ``(e_theta[q] - e_zeta[k])^2``; matrices from
    :func:`power_evidence_matrix` give ``(E_theta - E_zeta)^2`` entrywise.
    Undefined evidences cost ``inf``.
    """
    et, ez = np.asarray(e_theta, float), np.asarray(e_zeta, float)
    if et.ndim == 1:
        C = (et[:, None] - ez[None, :]) ** 2
    else:
        C = (et - ez) ** 2
    return np.where(np.isfinite(C), C, np.inf)


def angular_index_correction(e_theta, e_zeta, return_cost: bool = False, tie_tol: float = 1e-8):
    """Global pairing of ``theta`` and ``zeta`` blocks by exhaustive search.

    Returns ``perm`` with ``perm[q]`` the ``zeta`` block matched to ``theta``
    block ``q``, minimizing the summed squared evidence mismatch over all
    ``L!`` pairings.  Pairings whose cost is within ``tie_tol`` times the
    squared evidence scale of the optimum count as ties; with evidence
    matrices the tie goes to the pairing with the largest total evidenced
    power (a wrong pairing can match with both evidences near zero).
    """
    C = assignment_cost(e_theta, e_zeta)
    L = C.shape[0]
    if C.shape != (L, L):
        raise ValueError("both dimensions need the same number of paths")
    if L > MAX_ENUMERATION:
        raise ValueError(f"exhaustive search supports at most {MAX_ENUMERATION} paths")
    rows = np.arange(L)
    perms = [np.array(p, dtype=int) for p in itertools.permutations(range(L))]
    costs = np.array([C[rows, p].sum() for p in perms])
    best_cost = float(costs.min())
    if not np.isfinite(best_cost):
        # every pairing has an undefined evidence; fall back to finite entries
        Cf = np.where(np.isfinite(C), C, np.nanmax(np.where(np.isfinite(C), C, 0)) + 1)
        _, best = linear_sum_assignment(Cf)
        best_cost = float(C[rows, best].sum())
        return (best, best_cost) if return_cost else best
    et, ez = np.asarray(e_theta, float), np.asarray(e_zeta, float)
    if et.ndim == 2:
        scale = max(float(np.nanmax(np.abs(np.concatenate([et.ravel(), ez.ravel()])))), 1e-300)
        tied = np.flatnonzero(costs <= best_cost + tie_tol * scale**2)
        mean = np.nan_to_num(0.5 * (et + ez))
        power = np.array([mean[rows, perms[i]].sum() for i in tied])
        # first maximum keeps the lexicographic order among exact ties
        i = int(tied[int(np.argmax(power))])
    else:
        i = int(np.argmin(costs))
    best = perms[i]
    return (best, float(costs[i])) if return_cost else best


def hungarian_assignment(e_theta, e_zeta) -> np.ndarray:
    """Same objective solved by the Hungarian method (cross-check, any ``L``)."""
    C = assignment_cost(e_theta, e_zeta)
    big = np.max(C[np.isfinite(C)], initial=0.0) * 10 + 1
    _, cols = linear_sum_assignment(np.where(np.isfinite(C), C, big))
    return cols


def permutation_costs(e_theta, e_zeta) -> dict:
    """Cost of every permutation (for optimality checks)."""
    C = assignment_cost(e_theta, e_zeta)
    L = C.shape[0]
    rows = np.arange(L)
    return {p: float(C[rows, list(p)].sum()) for p in itertools.permutations(range(L))}


@dataclass
class PhiRecovery:
    phi: np.ndarray
    clipped: np.ndarray
    guarded: np.ndarray

    @property
    def n_clipped(self) -> int:
        return int(self.clipped.sum())


def recover_phi(theta_hat, zeta_hat, return_diagnostics: bool = False):
    """``phi = arcsin(sin(zeta) / sin(theta))`` with the argument clipped to ``[-1, 1]``.

    ``sin(theta)`` below ``1e-3`` is raised to that floor and flagged.
    """
    theta_hat = np.atleast_1d(np.asarray(theta_hat, float))
    zeta_hat = np.atleast_1d(np.asarray(zeta_hat, float))
    st = np.sin(theta_hat)
    guarded = st < SIN_THETA_FLOOR
    arg = np.sin(zeta_hat) / np.maximum(st, SIN_THETA_FLOOR)
    clipped = np.abs(arg) > 1
    phi = np.arcsin(np.clip(arg, -1, 1))
    if return_diagnostics:
        return PhiRecovery(phi, clipped, guarded)
    return phi


# ---------------------------------------------------------------------------
# covariance reconstruction and error metrics


@dataclass
class FactoredCovariance:
    """``R = A diag(w) A^H`` with ``A`` of shape ``N x L``."""

    A: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, complex)
        self.w = np.asarray(self.w, float)
        if self.A.ndim != 2 or self.A.shape[1] != self.w.size:
            raise ValueError("factor and weights disagree")

    @property
    def shape(self):
        return (self.A.shape[0], self.A.shape[0])

    @property
    def rank(self) -> int:
        return self.w.size

    def dense(self) -> np.ndarray:
        return (self.A * self.w) @ self.A.conj().T

    def __array__(self, dtype=None, copy=None):
        R = self.dense()
        return R if dtype is None else R.astype(dtype)

    def frobenius_sq(self) -> float:
        G = self.A.conj().T @ self.A
        # nonnegative in exact arithmetic; cancellation can dip below zero
        return max(float(np.real(self.w @ (np.abs(G) ** 2) @ self.w)), 0.0)

    def __sub__(self, other: "FactoredCovariance") -> "FactoredCovariance":
        return FactoredCovariance(np.hstack([self.A, other.A]), np.concatenate([self.w, -other.w]))


def reconstruct_R(pathset_hat: PathSet, cfg: UpaConfig, mode: str = "exact", dense: bool = False):
    """``R = (1/L) sum_l power_l a_l a_l^H`` for estimated paths.

    Returns the factored form unless ``dense`` is set; ``mode`` picks the
    array-response model (``"planar"`` for far-field reconstruction).
    """
    L = len(pathset_hat)
    A = steering_matrix(cfg, pathset_hat, mode=mode)
    w = pathset_hat.power / L if L else np.zeros(0)
    R = FactoredCovariance(A, w)
    return R.dense() if dense else R


def nmse(R_hat, R_true) -> float:
    """``||R - R_hat||_F^2 / ||R||_F^2`` for dense or factored inputs."""
    if isinstance(R_hat, FactoredCovariance) and isinstance(R_true, FactoredCovariance):
        return nmse_factored(R_hat, R_true)
    R_hat = np.asarray(R_hat)
    R_true = np.asarray(R_true)
    return float(np.sum(np.abs(R_true - R_hat) ** 2) / np.sum(np.abs(R_true) ** 2))


def nmse_vec(x_hat, x_true) -> float:
    """``||x - x_hat||^2 / ||x||^2`` for vectors."""
    x_hat = np.ravel(np.asarray(x_hat))
    x_true = np.ravel(np.asarray(x_true))
    return float(np.linalg.norm(x_true - x_hat) ** 2 / np.linalg.norm(x_true) ** 2)


def nmse_factored(R_hat: FactoredCovariance, R_true: FactoredCovariance) -> float:
    """NMSE through ``L x L`` Gram matrices, never forming ``N x N`` arrays."""
    return (R_true - R_hat).frobenius_sq() / R_true.frobenius_sq()


def to_db(x) -> np.ndarray:
    return 10 * np.log10(np.maximum(np.asarray(x, float), 1e-300))


# ---------------------------------------------------------------------------
# pairing diagnostics


def _circular_nearest(est, truth, period=None):
    d = np.abs(np.asarray(est)[:, None] - np.asarray(truth)[None, :])
    if period is not None:
        d = np.minimum(d, period - d)
    return np.argmin(d, axis=1)


def misassigned_paths(theta_hat, zeta_hat, truth: PathSet) -> int:
    """Number of estimated paths whose angles point at different true paths.

    Each estimated ``theta`` is matched to the nearest true ``cos(theta)`` and
    each estimated ``zeta`` to the nearest true ``sin(zeta)``; a path counts as
    misassigned when the two matches disagree.
    """
    it = _circular_nearest(np.cos(theta_hat), np.cos(truth.theta))
    iz = _circular_nearest(np.sin(zeta_hat), np.sin(truth.zeta), period=2.0)
    return int(np.sum(it != iz))


def pairing_resolved(theta_hat, zeta_hat, truth: PathSet, tol: float | None = 0.02) -> bool:
    """True when both angle sets map one-to-one onto the true paths.

    Only then is the correct pairing defined; when two paths share a grid
    cell the nearest-path matching collapses and the trial says nothing about
    the pairing step.  With ``tol`` every estimate must also lie within
    ``tol`` of its match in ``cos(theta)`` and ``sin(zeta)``.
    """
    ct, ct0 = np.cos(theta_hat), np.cos(truth.theta)
    sz, sz0 = np.sin(zeta_hat), np.sin(truth.zeta)
    it = _circular_nearest(ct, ct0)
    iz = _circular_nearest(sz, sz0, period=2.0)
    L = len(truth)
    if len(set(it.tolist())) != L or len(set(iz.tolist())) != L:
        return False
    if tol is None:
        return True
    dz = np.abs(sz - sz0[iz])
    dz = np.minimum(dz, 2.0 - dz)
    return bool(np.all(np.abs(ct - ct0[it]) <= tol) and np.all(dz <= tol))


@dataclass
class EstimationResult:
    pathset_hat: PathSet
    permutation: np.ndarray
    nmse_r: float = float("nan")
    diagnostics: dict = field(default_factory=dict)


def build_pathset(theta_hat, zeta_hat, r_hat, power_hat, clip=True) -> tuple[PathSet, PhiRecovery]:
    """Estimated paths from paired angle estimates, distances and powers."""
    rec = recover_phi(theta_hat, zeta_hat, return_diagnostics=True)
    theta_hat = np.clip(np.asarray(theta_hat, float), 1e-9, np.pi - 1e-9)
    power = np.maximum(np.nan_to_num(np.asarray(power_hat, float)), 0.0)
    r = np.asarray(r_hat, float)
    r = np.where(np.isfinite(r) & (r > 0), r, np.inf)
    L = theta_hat.size
    ps = PathSet(theta_hat, rec.phi, r, np.sqrt(power).astype(complex), power, np.arange(L) == np.argmax(power) if L else None)
    return ps, rec


__all__ = [
    "DimensionEstimate",
    "EstimationResult",
    "FactoredCovariance",
    "PhiRecovery",
    "power_evidence",
    "power_evidence_matrix",
    "assignment_cost",
    "angular_index_correction",
    "hungarian_assignment",
    "permutation_costs",
    "recover_phi",
    "reconstruct_R",
    "build_pathset",
    "nmse",
    "nmse_vec",
    "nmse_factored",
    "to_db",
    "misassigned_paths",
    "pairing_resolved",
]
