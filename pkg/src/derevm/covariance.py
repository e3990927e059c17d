"""Angle- and distance-specific covariance matrices built from channel statistics.

Three matrices are formed from the entries ``v(n) = E{h_n conj(h_{-n})}`` of the
channel auto-correlation:

* ``W^theta(n_y, n_z) = v(n_y, n_z) + v(-n_y, n_z)`` depends on ``cos(theta)`` and
  ``sin(zeta) = sin(theta) sin(phi)`` only; the distance cancels.
* ``W^phi(n_y, n_z) = v(n_y, n_z) + v(n_y, -n_z)``, likewise distance free.
* ``W^r(n_y; m) = E{h_(0, m) conj(h_(n_y, m))}`` keeps the quadratic (distance)
  phase along one row of elements.

Every matrix can be computed analytically from a :class:`PathSet` or estimated
from a :class:`SnapshotBatch`.  Path powers carry the ``1/L`` factor of the
channel model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .array import PathSet, SnapshotBatch, UpaConfig, extra_distance_fresnel


@dataclass(frozen=True)
class PairingRule:
    """Index-selection rule of one dimension.

    ``index_map`` sends ``(n_y, n_z)`` to the partner index whose ``v`` entry is
    added (``theta``, ``phi``) or to the reference element (``r``).
    """

    dimension: str
    index_map: Callable[[int, int], tuple[int, int]]

    def __call__(self, n_y: int, n_z: int) -> tuple[int, int]:
        return self.index_map(n_y, n_z)


THETA_RULE = PairingRule("theta", lambda ny, nz: (-ny, nz))
PHI_RULE = PairingRule("phi", lambda ny, nz: (ny, -nz))
R_RULE = PairingRule("r", lambda ny, nz: (0, 0))
RULES = {"theta": THETA_RULE, "phi": PHI_RULE, "r": R_RULE}


@dataclass(frozen=True)
class CovarianceSet:
    w_theta: np.ndarray
    w_phi: np.ndarray
    w_r: np.ndarray
    mode: str
    sample_count: int | None = None

    def __post_init__(self):
        if self.mode not in ("analytic", "sample"):
            raise ValueError("mode must be 'analytic' or 'sample'")
        shapes = {np.shape(self.w_theta), np.shape(self.w_phi), np.shape(self.w_r)}
        if len(shapes) != 1:
            raise ValueError("covariance matrices must share one shape")

    @property
    def shape(self) -> tuple[int, int]:
        return np.shape(self.w_theta)

    def scaled(self, c: float) -> "CovarianceSet":
        return CovarianceSet(self.w_theta * c, self.w_phi * c, self.w_r * c, self.mode, self.sample_count)


def _path_powers(pathset: PathSet) -> np.ndarray:
    L = len(pathset)
    return pathset.power / L if L else pathset.power


def _v_entry(cfg, pathset, n_y, n_z):
    """Analytic ``E{h_n conj(h_{-n})}`` under the Fresnel model."""
    k = cfg.wavenumber
    p = _path_powers(pathset)[:, None]
    t, ph, r = (a[:, None] for a in (pathset.theta, pathset.phi, pathset.r))
    d = extra_distance_fresnel(cfg, t, ph, r, -n_y, -n_z) - extra_distance_fresnel(cfg, t, ph, r, n_y, n_z)
    return np.sum(p * np.exp(1j * k * d), axis=0)


def covariance_entry(cfg: UpaConfig, pathset: PathSet, n_y, n_z, rule: PairingRule | str):
    """One entry of ``W^theta``, ``W^phi`` or ``W^r`` under the Fresnel model.

    Cross-path terms are dropped (independent path phases).  Accepts scalar or
    array indices.
    """
    rule = RULES[rule] if isinstance(rule, str) else rule
    n_y = np.atleast_1d(np.asarray(n_y))
    n_z = np.atleast_1d(np.asarray(n_z))
    if len(pathset) == 0:
        return np.zeros(np.broadcast(n_y, n_z).shape, complex)
    if rule.dimension == "r":
        k = cfg.wavenumber
        p = _path_powers(pathset)[:, None]
        t, ph, r = (a[:, None] for a in (pathset.theta, pathset.phi, pathset.r))
        d = extra_distance_fresnel(cfg, t, ph, r, n_y, n_z)
        out = np.sum(p * np.exp(1j * k * d), axis=0)
    else:
        my, mz = rule(n_y, n_z)
        out = _v_entry(cfg, pathset, n_y, n_z) + _v_entry(cfg, pathset, my, mz)
    return out if out.size > 1 else out[0]


def _require_quarter_wave(cfg: UpaConfig):
    if not cfg.quarter_wave:
        raise ValueError("the closed-form covariance requires delta = wavelength/4")


def _sample_v(batch: SnapshotBatch) -> np.ndarray:
    H = batch.matrices()
    return np.mean(H * np.conj(H[:, ::-1, ::-1]), axis=0)


def build_w_theta(cfg: UpaConfig, source: PathSet | SnapshotBatch) -> np.ndarray:
    """``W^theta`` as an ``N_y x N_z`` matrix.

    Analytic: ``sum_l 2 p_l cos(pi n_y sin(zeta_l)) exp(j pi n_z cos(theta_l))``.
    """
    if isinstance(source, SnapshotBatch):
        V = _sample_v(source)
        return V + V[::-1, :]
    _require_quarter_wave(cfg)
    ny, nz = cfg.y_indices[:, None, None], cfg.z_indices[None, :, None]
    p = _path_powers(source)
    sz = np.sin(source.theta) * np.sin(source.phi)
    ct = np.cos(source.theta)
    return np.sum(2 * p * np.cos(np.pi * ny * sz) * np.exp(1j * np.pi * nz * ct), axis=-1)


def build_w_phi(cfg: UpaConfig, source: PathSet | SnapshotBatch) -> np.ndarray:
    """``W^phi``: ``sum_l 2 p_l cos(pi n_z cos(theta_l)) exp(j pi n_y sin(zeta_l))``."""
    if isinstance(source, SnapshotBatch):
        V = _sample_v(source)
        return V + V[:, ::-1]
    _require_quarter_wave(cfg)
    ny, nz = cfg.y_indices[:, None, None], cfg.z_indices[None, :, None]
    p = _path_powers(source)
    sz = np.sin(source.theta) * np.sin(source.phi)
    ct = np.cos(source.theta)
    return np.sum(2 * p * np.cos(np.pi * nz * ct) * np.exp(1j * np.pi * ny * sz), axis=-1)


def build_w_r(cfg: UpaConfig, source: PathSet | SnapshotBatch, n_z_offset: int | None = 0) -> np.ndarray:
    """Distance-bearing covariance ``W^r(n_y; m) = E{h_(0,m) conj(h_(n_y,m))}``.

    With an integer ``n_z_offset`` returns the length-``N_y`` slice for row
    ``m``; with ``None`` returns the ``N_y x N_z`` matrix of all slices.  The
    analytic slice is ``sum_l p_l exp(j k (dr_l(n_y, m) - dr_l(0, m)))`` with
    Fresnel extra distances measured from the array reference.  At ``m = 0``
    and ``delta = lambda/4`` the phase reads
    ``pi lambda n_y^2 (1 - sin^2 zeta) / (16 r) - (pi/2) n_y sin zeta``.
    """
    if n_z_offset is None:
        return np.stack([build_w_r(cfg, source, m) for m in cfg.z_indices], axis=1)
    m = int(n_z_offset)
    if abs(m) > (cfg.n_z - 1) // 2:
        raise IndexError("n_z_offset outside the array")
    if isinstance(source, SnapshotBatch):
        H = source.matrices()
        col = m + (cfg.n_z - 1) // 2
        ref = H[:, (cfg.n_y - 1) // 2, col]
        return np.mean(ref[:, None] * np.conj(H[:, :, col]), axis=0)
    if len(source) == 0:
        return np.zeros(cfg.n_y, complex)
    p = _path_powers(source)
    t, ph, r = source.theta, source.phi, source.r
    ny = cfg.y_indices[:, None]
    d = extra_distance_fresnel(cfg, t, ph, r, ny, m) - extra_distance_fresnel(cfg, t, ph, r, 0, m)
    return np.sum(p * np.exp(1j * cfg.wavenumber * d), axis=1)


def build_covariance_set(cfg: UpaConfig, source: PathSet | SnapshotBatch) -> CovarianceSet:
    """All three matrices from one source."""
    if isinstance(source, SnapshotBatch):
        return CovarianceSet(
            build_w_theta(cfg, source),
            build_w_phi(cfg, source),
            build_w_r(cfg, source, None),
            "sample",
            source.T,
        )
    return CovarianceSet(
        build_w_theta(cfg, source), build_w_phi(cfg, source), build_w_r(cfg, source, None), "analytic"
    )


__all__ = [
    "PairingRule",
    "THETA_RULE",
    "PHI_RULE",
    "R_RULE",
    "CovarianceSet",
    "covariance_entry",
    "build_w_theta",
    "build_w_phi",
    "build_w_r",
    "build_covariance_set",
]
