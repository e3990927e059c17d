"""UPA geometry, spherical-wavefront channels and pilot/snapshot observations.

Elements are indexed symmetrically, ``n_y in {-(N_y-1)/2, ..., (N_y-1)/2}`` and
likewise for ``n_z``.  Channel vectors are flattened with ``n_y`` as the slow
axis, so ``h.reshape(n_y, n_z)`` gives the matrix ``V[n_y, n_z]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from ._validation import as_generator

SPEED_OF_LIGHT = 299_792_458.0

#: power ratio of each NLoS path relative to the LoS path (20 dB weaker)
NLOS_POWER_RATIO = 1e-2


@dataclass(frozen=True)
class UpaConfig:
    """Uniform planar array in the y-z plane.

    Parameters
    ----------
    n_y, n_z : int
        Odd element counts along y and z.
    wavelength : float
        Carrier wavelength in meters.
    delta : float, optional
        Element spacing, defaults to ``wavelength / 4``.
    element_area : float, optional
        Effective element aperture, defaults to ``wavelength**2 / (4 pi)``.
    n_rf : int
        Number of RF chains (rows of each measurement matrix).
    n_pilots : int
        Number of pilot slots ``P``.
    """

    n_y: int = 33
    n_z: int = 17
    wavelength: float = 0.01
    delta: float | None = None
    element_area: float | None = None
    n_rf: int = 8
    n_pilots: int = 32

    def __post_init__(self):
        for name in ("n_y", "n_z"):
            v = getattr(self, name)
            if int(v) != v or v < 1 or v % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {v}")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if self.delta is None:
            object.__setattr__(self, "delta", self.wavelength / 4)
        if self.element_area is None:
            object.__setattr__(self, "element_area", self.wavelength**2 / (4 * np.pi))
        if not 0 < self.delta <= self.wavelength / 4 * (1 + 1e-12):
            raise ValueError("element spacing must satisfy 0 < delta <= wavelength/4")
        # the effective aperture lambda^2/(4 pi) exceeds delta^2 at delta = lambda/4,
        # so only positivity is enforced here
        if not self.element_area > 0:
            raise ValueError("element_area must be positive")
        if self.n_rf < 1 or self.n_pilots < 1:
            raise ValueError("n_rf and n_pilots must be positive")

    @classmethod
    def desk(cls, **kw) -> "UpaConfig":
        """33 x 17 array at 30 GHz, fast enough for Monte Carlo on a laptop."""
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "UpaConfig":
        """129 x 65 array at 30 GHz."""
        kw.setdefault("n_rf", 16)
        return cls(n_y=129, n_z=65, **kw)

    @classmethod
    def from_frequency(cls, freq_hz: float, **kw) -> "UpaConfig":
        return cls(wavelength=SPEED_OF_LIGHT / freq_hz, **kw)

    def replace(self, **kw) -> "UpaConfig":
        return replace(self, **kw)

    @property
    def n_elements(self) -> int:
        return self.n_y * self.n_z

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def quarter_wave(self) -> bool:
        return bool(np.isclose(self.delta, self.wavelength / 4, rtol=1e-12, atol=0))

    @property
    def y_indices(self) -> np.ndarray:
        m = (self.n_y - 1) // 2
        return np.arange(-m, m + 1)

    @property
    def z_indices(self) -> np.ndarray:
        m = (self.n_z - 1) // 2
        return np.arange(-m, m + 1)

    def index_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(n_y, n_z)`` signed indices of every element."""
        ny, nz = np.meshgrid(self.y_indices, self.z_indices, indexing="ij")
        return ny.ravel(), nz.ravel()

    def flat_index(self, n_y, n_z):
        return (np.asarray(n_y) + (self.n_y - 1) // 2) * self.n_z + (
            np.asarray(n_z) + (self.n_z - 1) // 2
        )

    @property
    def occupation_ratio(self) -> float:
        return self.element_area / self.delta**2

    @property
    def aperture(self) -> float:
        """Array diameter ``D = delta * sqrt(N_y^2 + N_z^2)``."""
        return self.delta * float(np.hypot(self.n_y, self.n_z))

    @property
    def rayleigh_upper(self) -> float:
        """Far-field boundary ``2 D^2 / lambda``."""
        return 2 * self.aperture**2 / self.wavelength

    @property
    def rayleigh_lower(self) -> float:
        """Near-field (Fresnel region) boundary ``0.5 sqrt(D^3 / lambda)``."""
        return 0.5 * np.sqrt(self.aperture**3 / self.wavelength)


def rayleigh_bounds(cfg: UpaConfig) -> tuple[float, float]:
    return cfg.rayleigh_lower, cfg.rayleigh_upper


def _check_index(cfg: UpaConfig, n_y, n_z):
    if np.any(np.abs(n_y) > (cfg.n_y - 1) // 2) or np.any(np.abs(n_z) > (cfg.n_z - 1) // 2):
        raise IndexError("element index outside the array")


def element_center(cfg: UpaConfig, n_y: int, n_z: int) -> np.ndarray:
    """Center ``[0, n_y delta, n_z delta]`` of element ``(n_y, n_z)``."""
    _check_index(cfg, n_y, n_z)
    return np.array([0.0, n_y * cfg.delta, n_z * cfg.delta])


def source_position(theta, phi, r) -> np.ndarray:
    """Cartesian position of a source at distance ``r`` in direction ``(theta, phi)``."""
    theta, phi, r = np.broadcast_arrays(*map(np.asarray, (theta, phi, r)))
    return np.stack(
        [r * np.sin(theta) * np.cos(phi), r * np.sin(theta) * np.sin(phi), r * np.cos(theta)],
        axis=-1,
    )


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def channel_power_gain(cfg: UpaConfig, theta, phi, r, n_y=0, n_z=0, exact: bool = False):
    """Free-space power gain between a point source and element ``(n_y, n_z)``.

    The default is the small-element approximation
    ``A r sin(theta) cos(phi) / (4 pi |s - p|^3)``.  With ``exact=True`` the
    projected-aperture integrand is integrated over the square element with an
    8 x 8 Gauss-Legendre rule.
    """
    theta, phi, r = (np.asarray(x, dtype=float) for x in (theta, phi, r))
    if np.any(r <= 0):
        raise ValueError("distance must be positive")
    x = r * np.sin(theta) * np.cos(phi)
    if np.any(x <= 0):
        raise ValueError("source lies behind or in the array plane")
    _check_index(cfg, n_y, n_z)
    ys = r * np.sin(theta) * np.sin(phi) - n_y * cfg.delta
    zs = r * np.cos(theta) - n_z * cfg.delta
    if not exact:
        return cfg.element_area * x / (4 * np.pi * (x**2 + ys**2 + zs**2) ** 1.5)
    half = 0.5 * np.sqrt(cfg.element_area)
    u = half * _GL_NODES
    w = half * _GL_WEIGHTS
    dy = ys[..., None, None] - u[:, None]
    dz = zs[..., None, None] - u[None, :]
    integrand = x[..., None, None] / (4 * np.pi * (x[..., None, None] ** 2 + dy**2 + dz**2) ** 1.5)
    return np.einsum("...ij,i,j->...", integrand, w, w)


def _geometry(cfg: UpaConfig, theta, phi, n_y, n_z):
    """Return ``r'`` and ``r' g``, the aperture radius and its projection."""
    n_y = np.asarray(n_y, dtype=float)
    n_z = np.asarray(n_z, dtype=float)
    rp = cfg.delta * np.hypot(n_y, n_z)
    proj = cfg.delta * (n_y * np.sin(theta) * np.sin(phi) + n_z * np.cos(theta))
    return rp, proj


def extra_distance_exact(cfg: UpaConfig, theta, phi, r, n_y, n_z):
    """Exact path-length difference ``|s - p| - r`` between element ``n`` and the reference."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("distance must be positive")
    rp, proj = _geometry(cfg, theta, phi, n_y, n_z)
    if np.all(np.isinf(r)):
        return -proj * np.ones(np.broadcast(rp, r).shape)
    # r [sqrt(1 + q) - 1] written without cancellation, q = (r'^2 - 2 r' g r) / r^2
    q = (rp**2 - 2 * proj * r) / r**2
    out = r * q / (np.sqrt(1 + q) + 1)
    return np.where(np.isinf(r), -proj, out)


def extra_distance_fresnel(cfg: UpaConfig, theta, phi, r, n_y, n_z):
    """Second-order (Fresnel) expansion of the extra distance."""
    rp, proj = _geometry(cfg, theta, phi, n_y, n_z)
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.asarray(r, dtype=float)
    return (rp**2 - proj**2) * inv / 2 - proj


def array_response(cfg: UpaConfig, theta, phi, r, mode: str = "exact") -> np.ndarray:
    """Array response ``exp(-j 2 pi / lambda * dr)`` over all elements.

    ``mode`` selects the extra-distance model: ``"exact"``, ``"fresnel"`` or
    ``"planar"`` (far-field).  ``r = inf`` is accepted and gives the planar
    response in every mode.
    """
    ny, nz = cfg.index_grid()
    if mode == "exact":
        dr = extra_distance_exact(cfg, theta, phi, r, ny, nz)
    elif mode == "fresnel":
        dr = extra_distance_fresnel(cfg, theta, phi, r, ny, nz)
    elif mode == "planar":
        dr = -_geometry(cfg, theta, phi, ny, nz)[1]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.exp(-1j * cfg.wavenumber * dr)


@dataclass(frozen=True)
class Path:
    theta: float
    phi: float
    r: float
    beta: complex
    power: float
    is_los: bool = False


@dataclass(frozen=True)
class PathSet:
    """Propagation paths; ``power`` holds ``E|beta|^2`` for every path."""

    theta: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    beta: np.ndarray
    power: np.ndarray
    is_los: np.ndarray = field(default=None)

    def __post_init__(self):
        arrs = {}
        for name, dtype in (("theta", float), ("phi", float), ("r", float), ("beta", complex), ("power", float)):
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=dtype)).copy()
            a.setflags(write=False)
            arrs[name] = a
        n = arrs["theta"].size
        if any(a.shape != (n,) for a in arrs.values()):
            raise ValueError("path fields must be 1-D of equal length")
        los = self.is_los
        los = np.zeros(n, bool) if los is None else np.atleast_1d(np.asarray(los, bool)).copy()
        if los.shape != (n,):
            raise ValueError("is_los length mismatch")
        if np.any(arrs["r"] <= 0) or np.any(arrs["power"] < 0):
            raise ValueError("distances must be positive and powers non-negative")
        los.setflags(write=False)
        for name, a in arrs.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "is_los", los)

    def __len__(self):
        return self.theta.size

    def __iter__(self):
        for i in range(len(self)):
            yield Path(self.theta[i], self.phi[i], self.r[i], self.beta[i], self.power[i], bool(self.is_los[i]))

    @property
    def n_paths(self) -> int:
        return len(self)

    @property
    def zeta(self) -> np.ndarray:
        """Composite angle with ``sin(zeta) = sin(theta) sin(phi)``."""
        return np.arcsin(np.clip(np.sin(self.theta) * np.sin(self.phi), -1, 1))

    def with_(self, **kw) -> "PathSet":
        d = dict(theta=self.theta, phi=self.phi, r=self.r, beta=self.beta, power=self.power, is_los=self.is_los)
        d.update(kw)
        return PathSet(**d)

    def subset(self, idx) -> "PathSet":
        idx = np.atleast_1d(idx)
        return PathSet(self.theta[idx], self.phi[idx], self.r[idx], self.beta[idx], self.power[idx], self.is_los[idx])

    @classmethod
    def empty(cls) -> "PathSet":
        z = np.zeros(0)
        return cls(z, z, z, z, z, np.zeros(0, bool))


def make_pathset(cfg: UpaConfig, theta, phi, r, rng=None, nlos_ratio: float = NLOS_POWER_RATIO) -> PathSet:
    """Build a PathSet whose first entry is the LoS path.

    The LoS gain is ``sqrt(f)`` with ``f`` evaluated at the reference element;
    NLoS paths get variance ``nlos_ratio * f_LoS`` and, when ``rng`` is given,
    a CN draw for their realized gain.
    """
    theta, phi, r = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (theta, phi, r))
    L = theta.size
    f_los = float(channel_power_gain(cfg, theta[0], phi[0], r[0]))
    power = np.full(L, nlos_ratio * f_los)
    power[0] = f_los
    beta = np.sqrt(power).astype(complex)
    if rng is not None and L > 1:
        rng = as_generator(rng)
        beta[1:] = np.sqrt(power[1:] / 2) * (rng.standard_normal(L - 1) + 1j * rng.standard_normal(L - 1))
    is_los = np.zeros(L, bool)
    is_los[0] = True
    return PathSet(theta, phi, r, beta, power, is_los)


def sample_pathset(
    cfg: UpaConfig,
    n_paths: int,
    rng=None,
    r_range: tuple[float, float] | None = None,
    nlos_ratio: float = NLOS_POWER_RATIO,
    min_projection: float = 0.05,
) -> PathSet:
    """Random paths: ``theta ~ U(0, pi)``, ``phi ~ U(-pi/2, pi/2)``, ``r ~ U(r_range)``.

    The default distance range is ``[rayleigh_lower, rayleigh_upper / 2]``.
    Directions whose projection onto the array normal is below
    ``min_projection`` are redrawn, since the gain model vanishes there.
    """
    rng = as_generator(rng)
    lo, hi = r_range if r_range is not None else (cfg.rayleigh_lower, 0.5 * cfg.rayleigh_upper)
    theta = np.empty(n_paths)
    phi = np.empty(n_paths)
    for i in range(n_paths):
        while True:
            t, p = rng.uniform(0, np.pi), rng.uniform(-np.pi / 2, np.pi / 2)
            if np.sin(t) * np.cos(p) >= min_projection:
                break
        theta[i], phi[i] = t, p
    r = rng.uniform(lo, hi, n_paths)
    return make_pathset(cfg, theta, phi, r, rng=rng, nlos_ratio=nlos_ratio)


def generate_channel(cfg: UpaConfig, pathset: PathSet, rng=None, mode: str = "exact") -> np.ndarray:
    """``h = sqrt(1/L) sum_l beta_l a_l``.

    With ``rng`` the NLoS gains are redrawn from ``CN(0, power)``; otherwise
    the realized gains stored in ``pathset`` are used.
    """
    L = len(pathset)
    if L == 0:
        raise ValueError("pathset is empty")
    beta = np.array(pathset.beta)
    if rng is not None:
        rng = as_generator(rng)
        nl = ~pathset.is_los
        k = int(nl.sum())
        if k:
            beta[nl] = np.sqrt(pathset.power[nl] / 2) * (rng.standard_normal(k) + 1j * rng.standard_normal(k))
    A = steering_matrix(cfg, pathset, mode=mode)
    return A @ beta / np.sqrt(L)


def steering_matrix(cfg: UpaConfig, pathset: PathSet, mode: str = "exact") -> np.ndarray:
    """N x L matrix of array responses."""
    if len(pathset) == 0:
        return np.zeros((cfg.n_elements, 0), complex)
    return np.stack(
        [array_response(cfg, t, p, r, mode=mode) for t, p, r in zip(pathset.theta, pathset.phi, pathset.r)],
        axis=1,
    )


@dataclass(frozen=True)
class SnapshotBatch:
    """``T`` channel realizations sharing one set of path geometries."""

    cfg: UpaConfig
    snapshots: np.ndarray  # T x N

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.snapshots, dtype=complex))
        if s.shape[1] != self.cfg.n_elements:
            raise ValueError("snapshot length does not match the array")
        object.__setattr__(self, "snapshots", s)

    @property
    def T(self) -> int:
        return self.snapshots.shape[0]

    def matrices(self) -> np.ndarray:
        """Snapshots reshaped to ``T x N_y x N_z``."""
        return self.snapshots.reshape(self.T, self.cfg.n_y, self.cfg.n_z)


def generate_snapshots(
    cfg: UpaConfig,
    pathset: PathSet,
    n_snapshots: int,
    rng=None,
    noise_var: float = 0.0,
    mode: str = "exact",
) -> SnapshotBatch:
    """Draw ``T`` channels with fresh NLoS gains and optional white estimation noise.

    ``noise_var`` is the per-element variance of the additive noise on each
    snapshot (for pilot-based snapshots use :func:`snapshot_noise_var`).
    """
    rng = as_generator(rng)
    L = len(pathset)
    A = steering_matrix(cfg, pathset, mode=mode) / np.sqrt(L)
    T = int(n_snapshots)
    if T < 1:
        raise ValueError("need at least one snapshot")
    beta = np.tile(pathset.beta, (T, 1))
    nl = ~pathset.is_los
    k = int(nl.sum())
    if k:
        g = rng.standard_normal((T, k)) + 1j * rng.standard_normal((T, k))
        beta[:, nl] = np.sqrt(pathset.power[nl] / 2) * g
    H = beta @ A.T
    if noise_var > 0:
        n = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
        H = H + np.sqrt(noise_var / 2) * n
    return SnapshotBatch(cfg, H)


def mean_channel_power(pathset: PathSet) -> float:
    """``E|h_n|^2`` per element (identical for all elements)."""
    return float(np.sum(pathset.power) / len(pathset))


def snapshot_noise_var(pathset: PathSet, snr_db: float, n_pilots: int) -> float:
    """Per-element noise variance of a least-squares snapshot built from ``P`` pilots.

    SNR is the per-pilot ratio of received channel power to noise power; the
    LS estimate averages ``P`` pilots and divides the noise by ``P``.
    """
    return mean_channel_power(pathset) / (10 ** (snr_db / 10) * n_pilots)


def random_pilot_design(cfg: UpaConfig, rng=None, n_pilots: int | None = None):
    """Combiners ``F_p ~ CN(0, 1/N)``, unit-modulus diagonal patterns and unit symbols."""
    rng = as_generator(rng)
    P = cfg.n_pilots if n_pilots is None else n_pilots
    N = cfg.n_elements
    F = (rng.standard_normal((P, cfg.n_rf, N)) + 1j * rng.standard_normal((P, cfg.n_rf, N))) / np.sqrt(2 * N)
    M = np.exp(1j * rng.uniform(0, 2 * np.pi, (P, N)))
    x = np.ones(P, complex)
    return F, M, x


def simulate_pilots(cfg: UpaConfig, h, combiners, patterns, symbols, noise_var: float, rng=None) -> np.ndarray:
    """Stacked pilot observations ``y_p = F_p M_p (h x_p + n_p)``.

    ``patterns`` holds the diagonals of ``M_p`` (P x N) or full P x N x N
    matrices.  Returns a vector of length ``P * N_RF``.
    """
    h = np.asarray(h, complex)
    F = np.asarray(combiners, complex)
    M = np.asarray(patterns, complex)
    x = np.asarray(symbols, complex)
    P, n_rf, N = F.shape
    if h.shape != (N,) or x.shape != (P,):
        raise ValueError("dimension mismatch between channel, combiners and symbols")
    if M.shape == (P, N):
        FM = F * M[:, None, :]
    elif M.shape == (P, N, N):
        FM = F @ M
    else:
        raise ValueError("pattern shape must be (P, N) or (P, N, N)")
    rng = as_generator(rng)
    sig = FM @ h * x[:, None]
    if noise_var > 0:
        n = np.sqrt(noise_var / 2) * (rng.standard_normal((P, N)) + 1j * rng.standard_normal((P, N)))
        sig = sig + np.einsum("prn,pn->pr", FM, n)
    return sig.reshape(P * n_rf)


# ---------------------------------------------------------------------------
# snapshot -> compressed observation mapping


DIMENSIONS = ("theta", "phi", "r")


@dataclass(frozen=True)
class Perturbation:
    """Random error ``dF`` added to the composite linear map, one draw per snapshot.

    ``error_ratio`` is ``eps = sqrt(E|dF|^2 / E|F + dF|^2)``.
    """

    error_ratio: float
    seed: int | None = None

    def __post_init__(self):
        if not 0 <= self.error_ratio < 1:
            raise ValueError("error_ratio must lie in [0, 1)")

    def variance(self, F: np.ndarray) -> float:
        """Per-entry variance of ``dF`` for a nominal map ``F``."""
        e2 = self.error_ratio**2
        return e2 / (1 - e2) * float(np.sum(np.abs(F) ** 2)) / F.size

    def draw(self, F: np.ndarray, n_draws: int = 1, rng=None) -> np.ndarray:
        """Explicit perturbation matrices, shape ``(n_draws,) + F.shape``."""
        rng = np.random.default_rng(self.seed) if rng is None else as_generator(rng)
        shape = (n_draws,) + np.shape(F)
        g = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        return np.sqrt(self.variance(np.asarray(F)) / 2) * g


def _line_maps(cfg: UpaConfig, dimension: str, line: int):
    """Sparse selectors ``C (I + E)`` and the pair index maps for one line.

    Returns ``(S, first, second)`` where ``V_n = h[first[n]] * conj(h[second[n]])``
    and ``w_line = S @ V``.
    """
    ny, nz = cfg.index_grid()
    N = cfg.n_elements
    if dimension in ("theta", "phi"):
        first = np.arange(N)
        second = cfg.flat_index(-ny, -nz)
        if dimension == "theta":
            rows = cfg.flat_index(np.full(cfg.n_z, line), cfg.z_indices)
            mirror = cfg.flat_index(np.full(cfg.n_z, -line), cfg.z_indices)
        else:
            rows = cfg.flat_index(cfg.y_indices, np.full(cfg.n_y, line))
            mirror = cfg.flat_index(cfg.y_indices, np.full(cfg.n_y, -line))
        k = rows.size
        S = sparse.csr_matrix((np.ones(k), (np.arange(k), rows)), shape=(k, N))
        S = S + sparse.csr_matrix((np.ones(k), (np.arange(k), mirror)), shape=(k, N))
    elif dimension == "r":
        # w^r(n_y; m) = E{h_(0, m) h*_(n_y, m)}
        first = np.full(N, cfg.flat_index(0, line))
        second = np.arange(N)
        rows = cfg.flat_index(cfg.y_indices, np.full(cfg.n_y, line))
        k = rows.size
        S = sparse.csr_matrix((np.ones(k), (np.arange(k), rows)), shape=(k, N))
    else:
        raise ValueError(f"unknown dimension {dimension!r}")
    return S, first, second


def line_length(cfg: UpaConfig, dimension: str) -> int:
    return cfg.n_z if dimension == "theta" else cfg.n_y


def form_observation_from_snapshots(
    batch: SnapshotBatch,
    dimension: str,
    line: int,
    B: np.ndarray,
    perturbation: Perturbation | None = None,
    rng=None,
) -> np.ndarray:
    """Compressed observation of one covariance line from snapshots.

    Computes ``mean_tau (F + dF_tau) V_tau`` with ``F = B C (I + E)`` and
    ``V_tau = diag(h) E_{h->V} conj(h)``.  For ``theta`` the line is a row
    ``n_y`` of ``W^theta``; for ``phi`` a column ``n_z`` of ``W^phi``; for ``r``
    the ``n_z = line`` slice referenced to element ``(0, line)``.
    """
    if batch.T < 1:
        raise ValueError("empty snapshot batch")
    cfg = batch.cfg
    S, first, second = _line_maps(cfg, dimension, line)
    B = np.asarray(B, complex)
    if B.shape[1] != S.shape[0]:
        raise ValueError("measurement matrix width does not match the line length")
    H = batch.snapshots
    V = H[:, first] * np.conj(H[:, second])  # T x N
    if perturbation is None or perturbation.error_ratio == 0:
        w = np.asarray(S @ V.mean(axis=0)).ravel()
        return B @ w
    F = np.asarray((sparse.csr_matrix(B) @ S).todense())
    var = perturbation.variance(F)
    if rng is None:
        rng = np.random.default_rng(perturbation.seed)
    rng = as_generator(rng)
    # dF_tau V_tau with i.i.d. CN(0, var) entries is CN(0, var |V_tau|^2 I)
    scale = np.sqrt(var * np.sum(np.abs(V) ** 2, axis=1) / 2)
    z = rng.standard_normal((batch.T, F.shape[0])) + 1j * rng.standard_normal((batch.T, F.shape[0]))
    return F @ V.mean(axis=0) + (scale[:, None] * z).mean(axis=0)


def covariance_line_from_snapshots(batch: SnapshotBatch, dimension: str, line: int) -> np.ndarray:
    """Uncompressed sample covariance line ``C (I + E) mean_tau V_tau``."""
    S, first, second = _line_maps(batch.cfg, dimension, line)
    H = batch.snapshots
    V = (H[:, first] * np.conj(H[:, second])).mean(axis=0)
    return np.asarray(S @ V).ravel()


def true_covariance(cfg: UpaConfig, pathset: PathSet, mode: str = "exact") -> np.ndarray:
    """``R = E{h h^H} = (1/L) sum_l power_l a_l a_l^H`` (dense)."""
    A = steering_matrix(cfg, pathset, mode=mode)
    return (A * (pathset.power / len(pathset))) @ A.conj().T


__all__ = [
    "UpaConfig",
    "Path",
    "PathSet",
    "SnapshotBatch",
    "Perturbation",
    "rayleigh_bounds",
    "element_center",
    "source_position",
    "channel_power_gain",
    "extra_distance_exact",
    "extra_distance_fresnel",
    "array_response",
    "steering_matrix",
    "make_pathset",
    "sample_pathset",
    "generate_channel",
    "generate_snapshots",
    "snapshot_noise_var",
    "mean_channel_power",
    "random_pilot_design",
    "simulate_pilots",
    "form_observation_from_snapshots",
    "covariance_line_from_snapshots",
    "true_covariance",
    "line_length",
]
