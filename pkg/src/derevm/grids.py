"""Grids, off-grid dictionaries and the per-dimension compressed-sensing problems.

Each dimension has a grid that is uniform in a "phase coordinate":

* ``theta``: ``cos(theta)``, grid ``cos(theta_n) = (2/N)(n - (N-1)/2)``;
* ``zeta``: ``sin(zeta)``, same spacing;
* ``r``: the inverse-distance coordinate ``kappa = (1 - g^2) / r``, spaced by
  ``1 / Z`` with ``Z = N_y^2 delta / (8 beta^2)``; ``kappa = 0`` is the
  far-field anchor.

Angular offsets are stored in radians; distance offsets in ``kappa`` (1/m),
which keeps the distance dictionary linear in its exponent and lets the
far-field anchor move continuously into the near field.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_generator
from .array import UpaConfig
from .covariance import CovarianceSet

ANGLE_DIMENSIONS = ("theta", "zeta")


@dataclass(frozen=True)
class Grid:
    """Grid points of one dimension, stored as uniform phase coordinates."""

    dimension: str
    coords: np.ndarray
    spacing: float
    g2: float = 0.0
    upper: float | None = None  # largest reachable coordinate (distance grids)

    def __post_init__(self):
        if self.dimension not in ("theta", "zeta", "r"):
            raise ValueError(f"unknown dimension {self.dimension!r}")
        c = np.asarray(self.coords, dtype=float).copy()
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def count(self) -> int:
        return self.coords.size

    def __len__(self):
        return self.count

    @property
    def points(self) -> np.ndarray:
        """Angles in radians, or distances in meters (``inf`` for the anchor)."""
        if self.dimension == "theta":
            return np.arccos(self.coords)
        if self.dimension == "zeta":
            return np.arcsin(self.coords)
        with np.errstate(divide="ignore"):
            return (1 - self.g2) / self.coords

    def offset_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Offsets allowed at each point: half a cell either side, inside the domain."""
        h = self.spacing / 2
        c = self.coords
        if self.dimension == "theta":
            # theta decreases as cos(theta) increases
            lo = np.arccos(np.minimum(c + h, 1.0)) - np.arccos(c)
            hi = np.arccos(np.maximum(c - h, -1.0)) - np.arccos(c)
        elif self.dimension == "zeta":
            lo = np.arcsin(np.maximum(c - h, -1.0)) - np.arcsin(c)
            hi = np.arcsin(np.minimum(c + h, 1.0)) - np.arcsin(c)
        else:
            lo = np.maximum(c - h, 0.0) - c
            hi = np.full_like(c, h)
            if self.upper is not None and c.size:
                # the nearest point stretches its cell down to D_min
                hi[-1] = max(h, self.upper - c[-1])
        return lo, hi


def _angle_coords(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("grid size must be positive")
    return (2.0 / n) * (np.arange(n) - (n - 1) / 2)


def make_theta_grid(n: int) -> Grid:
    """``n`` points with ``cos(theta)`` uniform on ``(-1, 1)``."""
    return Grid("theta", _angle_coords(n), 2.0 / n)


def make_zeta_grid(n: int) -> Grid:
    """``n`` points with ``sin(zeta)`` uniform on ``(-1, 1)``."""
    return Grid("zeta", _angle_coords(n), 2.0 / n)


def z_delta(cfg: UpaConfig, beta_delta: float = 1.2) -> float:
    """Distance-ring scale ``Z = N_y^2 delta^2 / (2 beta^2 lambda)``."""
    if beta_delta <= 0:
        raise ValueError("beta_delta must be positive")
    return cfg.n_y**2 * cfg.delta**2 / (2 * beta_delta**2 * cfg.wavelength)


def max_distance_points(cfg: UpaConfig, g: float = 0.0, beta_delta: float = 1.2, d_min: float | None = None) -> int:
    """Uncapped number of rings ``floor(Z (1 - g^2) / D_min)``."""
    d_min = cfg.rayleigh_lower if d_min is None else d_min
    return int(np.floor(z_delta(cfg, beta_delta) * (1 - g**2) / d_min))


def make_distance_grid(
    cfg: UpaConfig,
    g: float = 0.0,
    beta_delta: float = 1.2,
    cap: int = 64,
    far_field_anchor: bool = True,
    d_min: float | None = None,
) -> Grid:
    """Rings ``r_n = Z (1 - g^2) / (n + 1)`` down to ``D_min``, plus an optional anchor at ``r = inf``.

    The offset range of the nearest point extends to ``D_min`` so that every
    distance in ``[D_min, inf]`` is reachable.  When more than ``cap`` rings survive they are resampled uniformly in
    ``1/r`` over the same range.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    Z = z_delta(cfg, beta_delta)
    d_min = cfg.rayleigh_lower if d_min is None else d_min
    g2 = float(g) ** 2
    n_max = max_distance_points(cfg, g, beta_delta, d_min)
    if n_max < 1 and not far_field_anchor:
        raise ValueError("no distance ring lies beyond D_min")
    kappa = np.arange(1, n_max + 1) / Z
    spacing = 1.0 / Z
    budget = cap - 1 if far_field_anchor else cap
    if kappa.size > budget:
        kappa = np.linspace(kappa[0], kappa[-1], budget) if budget > 1 else kappa[:budget]
        if budget > 1:
            spacing = kappa[1] - kappa[0]
    if far_field_anchor:
        kappa = np.concatenate([[0.0], kappa])
    return Grid("r", kappa, spacing, g2, upper=(1 - g2) / d_min)


# ---------------------------------------------------------------------------
# dictionaries


def _check_offsets(grid: Grid, offsets):
    if offsets is None:
        return np.zeros(grid.count)
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (grid.count,):
        raise ValueError("offset vector length does not match the grid")
    return offsets


def dictionary_theta(grid: Grid, offsets=None, indices=None, derivative: bool = False):
    """``Psi[n_z, n] = exp(j pi n_z cos(theta_n + dtheta_n))`` (and ``dPsi/d dtheta``)."""
    offsets = _check_offsets(grid, offsets)
    n = np.asarray(indices, dtype=float)[:, None]
    t = grid.points + offsets
    Psi = np.exp(1j * np.pi * n * np.cos(t))
    if derivative:
        return Psi, Psi * (-1j * np.pi * n * np.sin(t))
    return Psi


def dictionary_zeta(grid: Grid, offsets=None, indices=None, derivative: bool = False):
    """``Psi[n_y, n] = exp(j pi n_y sin(zeta_n + dzeta_n))`` (and derivative)."""
    offsets = _check_offsets(grid, offsets)
    n = np.asarray(indices, dtype=float)[:, None]
    z = grid.points + offsets
    Psi = np.exp(1j * np.pi * n * np.sin(z))
    if derivative:
        return Psi, Psi * (1j * np.pi * n * np.cos(z))
    return Psi


def dictionary_r(
    cfg: UpaConfig,
    grid: Grid,
    offsets=None,
    theta_hat=None,
    phi_hat=None,
    derivative: bool = False,
    slices=None,
):
    """Distance dictionary for one path with known direction.

    ``Psi[n_y, n] = exp(j [pi delta^2 n_y^2 (kappa_n + dkappa_n) / lambda
    - 2 pi delta n_y sin(zeta) / lambda])`` with ``sin(zeta) = sin(theta) sin(phi)``;
    at ``delta = lambda/4`` the exponent is
    ``pi lambda n_y^2 kappa / 16 - (pi/2) n_y sin(zeta)``.

    With ``slices`` (row offsets ``m``) the result has shape
    ``len(slices) x N_y x K``; row ``m`` adds the cross term
    ``-2 pi delta^2 n_y m sin(zeta) cos(theta) kappa / (lambda (1 - sin^2 zeta))``.
    """
    sz = np.sin(theta_hat) * np.sin(phi_hat)
    return _distance_dictionary(cfg, grid, offsets, sz, np.cos(theta_hat), derivative, slices)


def _distance_dictionary(cfg, grid, offsets, sz, ct, derivative=False, slices=None):
    offsets = _check_offsets(grid, offsets)
    n = cfg.y_indices.astype(float)[:, None]
    quad = np.pi * cfg.delta**2 * n**2 / cfg.wavelength
    lin = 2 * np.pi * cfg.delta * n * sz / cfg.wavelength
    kappa = grid.coords + offsets
    if slices is not None:
        m = np.asarray(slices, float)[:, None, None]
        quad = quad - 2 * np.pi * cfg.delta**2 * n * m * sz * ct / (cfg.wavelength * max(1 - sz**2, 1e-12))
    Psi = np.exp(1j * (quad * kappa - lin))
    if derivative:
        return Psi, Psi * (1j * quad)
    return Psi


def mutual_coherence(Psi: np.ndarray) -> float:
    """``max_{m != n} |psi_m^H psi_n| / (|psi_m| |psi_n|)``; 0 for a single column."""
    if Psi.shape[1] < 2:
        return 0.0
    Q = Psi / np.linalg.norm(Psi, axis=0)
    G = np.abs(Q.conj().T @ Q)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


# ---------------------------------------------------------------------------
# off-grid models and CS problems


@dataclass
class OffGridModel:
    """Grid(s), offsets and measurement matrices of one dimension.

    For the distance dimension the model is a union over paths: ``grids`` holds
    one distance grid per path and columns of path ``l`` form chain segment
    ``l``.  ``measurement`` has shape ``lines x N_RF x line_length``.
    """

    dimension: str
    grids: list
    indices: np.ndarray
    measurement: np.ndarray
    offsets: np.ndarray = None
    cfg: UpaConfig | None = None
    zeta_hat: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    slices: np.ndarray | None = None

    def __post_init__(self):
        if self.dimension not in ("theta", "zeta", "r"):
            raise ValueError(f"unknown dimension {self.dimension!r}")
        if isinstance(self.grids, Grid):
            self.grids = [self.grids]
        if self.dimension == "r":
            if self.cfg is None or self.zeta_hat is None:
                raise ValueError("the distance model needs cfg and the per-path zeta estimates")
            self.zeta_hat = np.atleast_1d(np.asarray(self.zeta_hat, float))
            if self.zeta_hat.size != len(self.grids):
                raise ValueError("one distance grid per path is required")
            if self.theta_hat is None:
                self.theta_hat = np.full(self.zeta_hat.size, np.pi / 2)
            self.theta_hat = np.atleast_1d(np.asarray(self.theta_hat, float))
            if self.theta_hat.size != self.zeta_hat.size:
                raise ValueError("theta_hat and zeta_hat must have one entry per path")
        self.measurement = np.asarray(self.measurement, complex)
        if self.measurement.ndim == 2:
            self.measurement = self.measurement[None]
        if self.measurement.shape[2] != len(self.indices):
            raise ValueError("measurement width does not match the line length")
        if self.offsets is None:
            self.offsets = np.zeros(self.n_columns)

    @property
    def grid(self) -> Grid:
        return self.grids[0]

    @property
    def n_columns(self) -> int:
        return sum(g.count for g in self.grids)

    @property
    def segments(self) -> list[slice]:
        out, start = [], 0
        for g in self.grids:
            out.append(slice(start, start + g.count))
            start += g.count
        return out

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([g.coords for g in self.grids])

    def offset_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(g.offset_bounds() for g in self.grids))
        return np.concatenate(lo), np.concatenate(hi)

    def clip(self, offsets) -> np.ndarray:
        lo, hi = self.offset_bounds()
        return np.clip(offsets, lo, hi)

    def dictionary(self, offsets=None, derivative: bool = False):
        offsets = self.offsets if offsets is None else np.asarray(offsets, float)
        if self.dimension == "theta":
            return dictionary_theta(self.grid, offsets, self.indices, derivative)
        if self.dimension == "zeta":
            return dictionary_zeta(self.grid, offsets, self.indices, derivative)
        parts = [
            _distance_dictionary(self.cfg, g, offsets[s], np.sin(z), np.cos(t), derivative, self.slices)
            for g, s, t, z in zip(self.grids, self.segments, self.theta_hat, self.zeta_hat)
        ]
        if derivative:
            return np.concatenate([p[0] for p in parts], axis=-1), np.concatenate([p[1] for p in parts], axis=-1)
        return np.concatenate(parts, axis=-1)

    def values(self, offsets=None) -> np.ndarray:
        """Continuous parameter of every column: angle, or ``kappa`` for distance."""
        offsets = self.offsets if offsets is None else offsets
        if self.dimension == "r":
            return self.coords + offsets
        return self.grid.points + offsets

    def phase_coords(self, offsets=None) -> np.ndarray:
        """Column positions in the uniform grid coordinate (cos, sin or ``kappa``)."""
        v = self.values(offsets)
        if self.dimension == "theta":
            return np.cos(v)
        if self.dimension == "zeta":
            return np.sin(v)
        return v

    def offset_at(self, column: int, coord: float) -> float:
        """Offset placing ``column`` at phase coordinate ``coord``, clipped to its cell."""
        base = self.coords[column]
        if self.dimension == "theta":
            off = np.arccos(np.clip(coord, -1, 1)) - np.arccos(base)
        elif self.dimension == "zeta":
            off = np.arcsin(np.clip(coord, -1, 1)) - np.arcsin(base)
        else:
            off = coord - base
        lo, hi = self.offset_bounds()
        return float(np.clip(off, lo[column], hi[column]))

    def spacings(self) -> np.ndarray:
        return np.concatenate([np.full(g.count, g.spacing) for g in self.grids])

    def distances(self, offsets=None) -> np.ndarray:
        """Distance of every column of the union model (``inf`` at ``kappa = 0``)."""
        kappa = self.values(offsets)
        g2 = np.concatenate([np.full(g.count, np.sin(z) ** 2) for g, z in zip(self.grids, self.zeta_hat)])
        with np.errstate(divide="ignore"):
            return np.where(kappa > 0, (1 - g2) / np.maximum(kappa, 1e-300), np.inf)


@dataclass
class CsProblem:
    """Stacked per-line observations ``y_line = B_line Psi(offsets) u_line + noise``."""

    observations: np.ndarray
    model: OffGridModel
    lines: np.ndarray = None
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        Y = np.asarray(self.observations, complex)
        if Y.ndim == 1:
            Y = Y[None]
        self.observations = Y
        if Y.shape[0] != self.model.measurement.shape[0] or Y.shape[1] != self.model.measurement.shape[1]:
            raise ValueError("observations do not match the measurement matrices")
        if self.lines is None:
            self.lines = np.arange(Y.shape[0])

    @property
    def line_count(self) -> int:
        return self.observations.shape[0]

    @property
    def dimension(self) -> str:
        return self.model.dimension


def draw_measurements(rng, lines: int, n_rf: int, length: int, variance: float) -> np.ndarray:
    """Per-line ``B ~ CN(0, variance)`` matrices, shape ``lines x n_rf x length``."""
    rng = as_generator(rng)
    shape = (lines, n_rf, length)
    return np.sqrt(variance / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def b_variance(cfg: UpaConfig, convention: str = "variance") -> float:
    """Entry variance of ``B``; the scale ``1/sqrt(N_y)`` read as a variance or a std."""
    if convention == "variance":
        return 1.0 / cfg.n_y
    if convention == "std":
        return 1.0 / cfg.n_y ** 0.5
    raise ValueError("convention must be 'variance' or 'std'")


def _covariance_lines(covset: CovarianceSet, cfg: UpaConfig, dimension: str, r_slices=(0,)):
    if dimension == "theta":
        return covset.w_theta, cfg.y_indices
    if dimension == "zeta":
        return covset.w_phi.T, cfg.z_indices
    cols = np.asarray(r_slices) + (cfg.n_z - 1) // 2
    return covset.w_r[:, cols].T, np.asarray(r_slices)


def line_indices(cfg: UpaConfig, dimension: str) -> np.ndarray:
    """Element indices along one observation line."""
    return cfg.z_indices if dimension == "theta" else cfg.y_indices


def default_model(cfg: UpaConfig, dimension: str, B: np.ndarray, grid_size: int | None = None, **r_kw) -> OffGridModel:
    """Off-grid model with the default grid of ``dimension``.

    Angle grids have as many points as the line length unless ``grid_size`` is
    given.  The distance model needs ``zeta_hat`` (one per path) and accepts
    the :func:`make_distance_grid` keywords.
    """
    idx = line_indices(cfg, dimension)
    if dimension == "theta":
        return OffGridModel("theta", make_theta_grid(grid_size or cfg.n_z), idx, B)
    if dimension == "zeta":
        return OffGridModel("zeta", make_zeta_grid(grid_size or cfg.n_y), idx, B)
    zeta_hat = np.atleast_1d(r_kw.pop("zeta_hat"))
    theta_hat = r_kw.pop("theta_hat", None)
    slices = r_kw.pop("slices", None)
    grids = [make_distance_grid(cfg, g=np.sin(z), **r_kw) for z in zeta_hat]
    return OffGridModel("r", grids, idx, B, cfg=cfg, zeta_hat=zeta_hat, theta_hat=theta_hat, slices=slices)


def assemble_cs_problem(
    covset: CovarianceSet,
    dimension: str,
    B_seed=None,
    cfg: UpaConfig | None = None,
    b_var: float | None = None,
    r_slices=(0,),
    grid_size: int | None = None,
    **r_kw,
) -> CsProblem:
    """Compressed observations ``y_line = B_line w_line`` of one dimension.

    ``theta`` lines are rows ``n_y`` of ``W^theta``; ``zeta`` lines are columns
    ``n_z`` of ``W^phi``; ``r`` lines are the ``W^r`` slices in ``r_slices``.
    """
    cfg = UpaConfig(n_y=covset.shape[0], n_z=covset.shape[1]) if cfg is None else cfg
    W, lines = _covariance_lines(covset, cfg, dimension, r_slices)
    b_var = b_variance(cfg) if b_var is None else b_var
    B = draw_measurements(B_seed, W.shape[0], cfg.n_rf, W.shape[1], b_var)
    if dimension == "r":
        r_kw.setdefault("slices", lines)
    model = default_model(cfg, dimension, B, grid_size=grid_size, **r_kw)
    Y = np.einsum("lmn,ln->lm", B, W)
    return CsProblem(Y, model, lines, truth=W)


__all__ = [
    "Grid",
    "OffGridModel",
    "CsProblem",
    "make_theta_grid",
    "make_zeta_grid",
    "make_distance_grid",
    "z_delta",
    "max_distance_points",
    "dictionary_theta",
    "dictionary_zeta",
    "dictionary_r",
    "mutual_coherence",
    "draw_measurements",
    "b_variance",
    "line_indices",
    "default_model",
    "assemble_cs_problem",
]
