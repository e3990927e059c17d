"""Sparse variational Bayesian inference with Markov support and off-grid refinement.

Model per line ``l`` (all lines share the support and the offsets)::

    y_l = B_l Psi(offsets) u_l + noise,   noise ~ CN(0, I / kappa)
    u_l[n] ~ CN(0, 1 / rho_l[n]),         rho_l[n] ~ Gamma(a, b) if alpha_n else Gamma(a_bar, b_bar)
    alpha ~ two-state Markov chain,       kappa ~ Gamma(a_kappa, b_kappa)

The E-step ("Entity A") updates ``q(u) q(rho) q(kappa)`` and the support
posterior; the chain module ("Entity B") runs forward-backward on the support
evidence; the M-step takes one Armijo-safeguarded ascent step on the offsets
of the expected log-likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, expit, gammaln, logsumexp

from ._validation import check_probability
from .grids import CsProblem

KAPPA_CAP = 1e12


@dataclass(frozen=True)
class LayeredPrior:
    """Hyperparameters of the three-layer sparse prior."""

    p01: float = 0.06 * 0.8 / 0.94
    p10: float = 0.8
    a: float = 0.99
    b: float = 0.99
    a_bar: float = 0.99
    b_bar: float = 0.01
    a_kappa: float = 1e-6
    b_kappa: float = 1e-6

    def __post_init__(self):
        check_probability(self.p01, "p01")
        check_probability(self.p10, "p10")
        for name in ("a", "b", "a_bar", "b_bar", "a_kappa", "b_kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_sparsity(cls, sparsity: float = 0.06, p10: float = 0.8, **kw) -> "LayeredPrior":
        """Chain with stationary activity ``sparsity`` and exit rate ``p10``."""
        check_probability(sparsity, "sparsity")
        return cls(p01=sparsity * p10 / (1 - sparsity), p10=p10, **kw)

    @classmethod
    def iid(cls, **kw) -> "LayeredPrior":
        """Uninformative i.i.d. support prior (``p01 = p10 = 0.5``)."""
        return cls(p01=0.5, p10=0.5, **kw)

    @property
    def stationary(self) -> float:
        return self.p01 / (self.p01 + self.p10)


@dataclass(frozen=True)
class SolverConfig:
    r_max: int = 50
    eps_mu: float = 1e-4
    eps_sigma: float = 1e-4
    armijo_step: float = 1.0
    armijo_shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 30
    inner_e_sweeps: int = 5
    kappa_cap: float = KAPPA_CAP
    precondition: bool = True
    full_newton_max: int = 32
    m_objective: str = "profile"  # or "surrogate"
    support_rule: str = "top"  # or "threshold"
    evidence: str = "extrinsic"  # or "plugin"
    dynamic_range_db: float | None = 60.0
    init_noise_ratio: float = 1e-5
    kappa_rule: str = "effective"
    gate_support: bool = True
    merge_tol: float = 0.5
    profile_kappa: bool = True
    swap_support: bool = True
    swap_gain: float = 1e-3

    def __post_init__(self):
        if self.r_max < 1 or self.inner_e_sweeps < 1:
            raise ValueError("r_max and inner_e_sweeps must be positive")
        if not 0 < self.armijo_shrink < 1 or not 0 < self.armijo_c < 1:
            raise ValueError("Armijo shrink and constant must lie in (0, 1)")
        if self.support_rule not in ("top", "threshold"):
            raise ValueError("support_rule must be 'top' or 'threshold'")
        if self.evidence not in ("extrinsic", "plugin"):
            raise ValueError("evidence must be 'extrinsic' or 'plugin'")


@dataclass
class VbiState:
    """Posterior state on the normalized scale (observations divided by ``scale``)."""

    mu: np.ndarray
    sigma: np.ndarray
    a_tilde: np.ndarray
    b_tilde: np.ndarray
    nu_post: np.ndarray
    nu_prior: np.ndarray
    llr: np.ndarray
    kappa_a: float
    kappa_b: float
    offsets: np.ndarray
    scale: float = 1.0
    iteration: int = 0
    kappa_cap: float = KAPPA_CAP
    history: list = field(default_factory=list)
    rho_used: np.ndarray | None = None
    log_odds: np.ndarray | None = None
    gate: np.ndarray | None = None
    msg_m: np.ndarray | None = None
    msg_v: np.ndarray | None = None
    trace: list = field(default_factory=list)  # (gate, offsets) per outer iteration

    @property
    def kappa(self) -> float:
        return min(self.kappa_a / self.kappa_b, self.kappa_cap) if self.kappa_b > 0 else self.kappa_cap

    @property
    def rho(self) -> np.ndarray:
        return self.a_tilde / self.b_tilde

    @property
    def nu_in(self) -> np.ndarray:
        """Entity-A support messages as probabilities."""
        return expit(self.llr)

    @property
    def nu_out(self) -> np.ndarray:
        """Support posteriors (alias of ``nu_post``)."""
        return self.nu_post

    def copy(self) -> "VbiState":
        return replace(
            self,
            mu=self.mu.copy(),
            sigma=self.sigma.copy(),
            a_tilde=self.a_tilde.copy(),
            b_tilde=self.b_tilde.copy(),
            nu_post=self.nu_post.copy(),
            nu_prior=self.nu_prior.copy(),
            llr=self.llr.copy(),
            offsets=self.offsets.copy(),
            history=list(self.history),
            trace=list(self.trace),
            rho_used=None if self.rho_used is None else self.rho_used.copy(),
            log_odds=None if self.log_odds is None else self.log_odds.copy(),
            gate=None if self.gate is None else self.gate.copy(),
            msg_m=None if self.msg_m is None else self.msg_m.copy(),
            msg_v=None if self.msg_v is None else self.msg_v.copy(),
        )


def problem_scale(problem: CsProblem) -> float:
    """Rough amplitude of ``u``: ``sqrt(sum |y|^2 / sum |B|^2)``."""
    num = float(np.sum(np.abs(problem.observations) ** 2))
    den = float(np.sum(np.abs(problem.model.measurement) ** 2))
    s = np.sqrt(num / den) if den > 0 else 0.0
    return s if s > 0 else 1.0


def init_state(problem: CsProblem, prior: LayeredPrior, cfg: SolverConfig | None = None) -> VbiState:
    """``offsets = 0``, support at the stationary rate, ``<rho>`` matched to the data scale and
    ``<kappa>^-1`` a fixed fraction (``init_noise_ratio``) of the mean of ``|y|^2``."""
    cfg = cfg or SolverConfig()
    L, M = problem.observations.shape
    K = problem.model.n_columns
    scale = problem_scale(problem)
    if cfg.dynamic_range_db is not None:
        scale *= 10 ** (-cfg.dynamic_range_db / 20)
    # initial coefficient variance matched to the data so that the first
    # E-step cannot explain the observations as noise
    u_var = (problem_scale(problem) / scale) ** 2
    y2 = np.abs(problem.observations / scale) ** 2
    noise = max(float(y2.mean()) * cfg.init_noise_ratio, 1e-300)
    pi1 = prior.stationary
    return VbiState(
        mu=np.zeros((L, K), complex),
        sigma=np.zeros((L, K, K), complex),
        a_tilde=np.full((L, K), prior.a),
        b_tilde=np.full((L, K), prior.a * u_var),
        nu_post=np.full(K, pi1),
        nu_prior=np.full(K, pi1),
        llr=np.zeros(K),
        log_odds=np.full(K, np.log(pi1) - np.log1p(-pi1)),
        kappa_a=1.0,
        kappa_b=noise,
        offsets=np.asarray(problem.model.offsets, float).copy(),
        scale=scale,
        # the cap bounds the SNR, so it is taken relative to the data power
        kappa_cap=cfg.kappa_cap / max(float(y2.mean()), 1e-300),
    )


def effective_dictionary(problem: CsProblem, offsets, derivative: bool = False):
    """``A = B Psi`` per line (and ``D = B dPsi`` when requested)."""
    B = problem.model.measurement
    if derivative:
        Psi, dPsi = problem.model.dictionary(offsets, derivative=True)
        return B @ Psi, B @ dPsi
    return B @ problem.model.dictionary(offsets)


# ---------------------------------------------------------------------------
# Entity A


def _store_messages(state, sel, m, v):
    if state.msg_m is None:
        state.msg_m = np.zeros(state.mu.shape, complex)
        state.msg_v = np.full(state.mu.shape, np.inf)
    state.msg_m[sel] = m
    state.msg_v[sel] = v


def update_u(state: VbiState, problem: CsProblem, A=None, line=None):
    """Gaussian posterior of ``u`` and the likelihood-only coefficient messages.

    Without a gate, ``Sigma = Lam - Lam A^H C^{-1} A Lam`` and
    ``mu = Lam A^H C^{-1} y`` with ``Lam = diag(1/<rho>)`` and
    ``C = A Lam A^H + I/<kappa>`` (the ``N_RF x N_RF`` inversion identity).
    With a gate, gated-off columns get ``Lam = 0`` and the posterior of the
    active columns is computed in coefficient space, which avoids the
    cancellation of the identity at high SNR.  Updates ``state`` in place (all
    lines, or only ``line``) and returns ``(mu, sigma)``.
    """
    if A is None:
        A = effective_dictionary(problem, state.offsets)
    Y = problem.observations / state.scale
    sel = slice(None) if line is None else slice(line, line + 1)
    A, Y = A[sel], Y[sel]
    lam = state.b_tilde[sel] / state.a_tilde[sel]
    kappa = state.kappa
    M, K = A.shape[1], A.shape[2]
    AH = np.conj(np.swapaxes(A, 1, 2))
    idx = np.arange(K)
    if state.gate is None:
        G = (A * lam[:, None, :]) @ AH
        G[:, np.arange(M), np.arange(M)] += 1.0 / kappa
        rhs = np.concatenate([A, Y[:, :, None]], axis=2)
        try:
            X = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError:
            ridge = 1e-12 * max(float(np.max(np.abs(G))), 1.0)
            X = np.linalg.solve(G + ridge * np.eye(M), rhs)
        S = AH @ X[:, :, :K]
        t = (AH @ X[:, :, K:])[:, :, 0]
        sigma = -lam[:, :, None] * S * lam[:, None, :]
        sigma[:, idx, idx] += lam
        mu = lam * t
        q = np.real(S[:, idx, idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(q > 0, np.maximum(1.0 / q - lam, 1e-300), np.inf)
            m = np.where(q > 0, t / q, 0.0)
        rho_used = 1.0 / lam
    else:
        act = np.flatnonzero(state.gate)
        Aa = A[:, :, act]
        AaH = AH[:, act, :]
        P = kappa * (AaH @ Aa)
        P[:, np.arange(act.size), np.arange(act.size)] += 1.0 / lam[:, act]
        Sa = np.linalg.inv(P)
        Sa = 0.5 * (Sa + np.conj(np.swapaxes(Sa, 1, 2)))
        mua = kappa * (Sa @ (AaH @ Y[:, :, None]))[:, :, 0]
        sigma = np.zeros((A.shape[0], K, K), complex)
        sigma[:, act[:, None], act[None, :]] = Sa
        mu = np.zeros((A.shape[0], K), complex)
        mu[:, act] = mua
        r = Y - np.einsum("lmk,lk->lm", Aa, mua)
        # messages of inactive columns: q = a^H C^{-1} a, t = a^H C^{-1} y
        t = kappa * (AH @ r[:, :, None])[:, :, 0]
        AHAa = AH @ Aa
        q = kappa * np.sum(np.abs(A) ** 2, axis=1) - kappa**2 * np.real(
            np.einsum("lka,lab,lkb->lk", AHAa, Sa, np.conj(AHAa))
        )
        q = np.maximum(q, 1e-300)
        v, m = 1.0 / q, t / q
        # active columns: remove the own prior from the posterior
        sd = np.real(np.diagonal(Sa, axis1=1, axis2=2))
        prec_lik = np.maximum(1.0 / sd - 1.0 / lam[:, act], 1e-300)
        v[:, act] = 1.0 / prec_lik
        m[:, act] = mua / (sd * prec_lik)
        rho_used = np.full(lam.shape, np.inf)
        rho_used[:, act] = 1.0 / lam[:, act]
    sigma = 0.5 * (sigma + np.conj(np.swapaxes(sigma, 1, 2)))
    state.mu[sel] = mu
    state.sigma[sel] = sigma
    _store_messages(state, sel, m, v)
    if state.rho_used is None:
        state.rho_used = np.array(rho_used)
    else:
        state.rho_used[sel] = rho_used
    return mu, sigma


def second_moment(state: VbiState) -> np.ndarray:
    """``|mu|^2 + diag(Sigma)`` per line and column."""
    return np.abs(state.mu) ** 2 + np.real(np.diagonal(state.sigma, axis1=1, axis2=2))


def update_rho(state: VbiState, prior: LayeredPrior, line=None):
    """Gamma posterior of the precisions given the support posterior ``nu_post``.

    When ``state.gate`` is set, gated-off columns keep the inactive prior
    ``Gamma(a_bar, b_bar)`` instead of the data-driven update, which switches
    them off in the next ``u`` update.
    """
    sel = slice(None) if line is None else slice(line, line + 1)
    nu = state.nu_post[None, :]
    s = second_moment(state)[sel]
    a_t = nu * prior.a + (1 - nu) * prior.a_bar + 1
    b_t = nu * prior.b + (1 - nu) * prior.b_bar + s
    if state.gate is not None:
        off = ~state.gate[None, :]
        a_t = np.where(off, prior.a_bar, a_t)
        b_t = np.where(off, prior.b_bar, b_t)
    state.a_tilde[sel] = a_t
    state.b_tilde[sel] = b_t
    return a_t, b_t


def residual_power(state: VbiState, problem: CsProblem, A=None, offsets=None) -> float:
    """``sum_l |y_l - A_l mu_l|^2 + tr(A_l Sigma_l A_l^H)`` on the normalized scale."""
    if A is None:
        A = effective_dictionary(problem, state.offsets if offsets is None else offsets)
    Y = problem.observations / state.scale
    r = Y - np.einsum("lmk,lk->lm", A, state.mu)
    tr = np.einsum("lmk,lkj,lmj->", A, state.sigma, np.conj(A)).real
    return float(np.sum(np.abs(r) ** 2) + tr)


def update_kappa(state: VbiState, problem: CsProblem, prior: LayeredPrior, A=None, rule: str = "conjugate"):
    """Gamma update of the noise precision; ``<kappa>`` is capped.

    ``"conjugate"`` is the mean-field update ``a + LM`` over ``b + E|y - A u|^2``.
    ``"effective"`` replaces the trace term by the count of well-determined
    coefficients, ``gamma = sum(1 - rho Sigma_nn)``, giving shape ``a + LM - gamma``
    over ``b + |y - A mu|^2``; it escapes the slow drift of the conjugate update
    when there are more columns than measurements.
    """
    L, M = problem.observations.shape
    if rule == "effective":
        if A is None:
            A = effective_dictionary(problem, state.offsets)
        Y = problem.observations / state.scale
        r2 = float(np.sum(np.abs(Y - np.einsum("lmk,lk->lm", A, state.mu)) ** 2))
        sd = np.real(np.diagonal(state.sigma, axis1=1, axis2=2))
        lam = np.where(np.isfinite(state.rho_used), 1.0 / state.rho_used, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            well = np.where(lam > 0, 1.0 - sd / np.where(lam > 0, lam, 1.0), 0.0)
        gamma = float(np.sum(np.clip(well, 0.0, 1.0)))
        dof = max(L * M - gamma, 1e-3 * L * M)
        state.kappa_a = prior.a_kappa + dof
        state.kappa_b = prior.b_kappa + r2
    else:
        state.kappa_a = prior.a_kappa + L * M
        state.kappa_b = prior.b_kappa + residual_power(state, problem, A)
    return state.kappa_a, state.kappa_b


_LOG_RHO = np.arange(-40.0, 40.0 + 1e-9, 0.5)


def _log_marginal(m2, v, a, b):
    """``log int CN(m; 0, v + 1/rho) Gamma(rho; a, b) drho`` by quadrature in ``log rho``.

    The trapezoid rule on this smooth integrand is accurate to about 1e-6.
    """
    t = _LOG_RHO
    rho = np.exp(t)
    lg = a * np.log(b) - gammaln(a) + a * t - b * rho
    var = v[..., None] + 1.0 / rho
    f = lg - np.log(np.pi * var) - m2[..., None] / var
    top = f.max(axis=-1)
    return top + np.log(np.exp(f - top[..., None]).sum(axis=-1) * (t[1] - t[0]))


def coefficient_messages(state: VbiState):
    """Likelihood-only Gaussian message ``CN(m, v)`` on every coefficient.

    This is the data's view of ``u_n`` with the coefficient's own prior
    removed, as computed by the last :func:`update_u`.
    """
    return state.msg_m, state.msg_v


def support_llr(state: VbiState, prior: LayeredPrior, evidence: str = "extrinsic") -> np.ndarray:
    """Block log-likelihood ratio of ``alpha_n = 1`` versus ``alpha_n = 0``.

    Each line contributes the log marginal likelihood of its coefficient with
    ``rho`` integrated out under either Gamma hypothesis.  ``"extrinsic"``
    evaluates it on the likelihood-only message of the coefficient;
    ``"plugin"`` uses the closed form at ``s = |mu|^2 + Sigma_nn``, i.e.
    ``log(a) + a log(b) - (a + 1) log(b + s)`` minus the inactive counterpart.
    """
    if evidence == "plugin":
        s = second_moment(state)
        l1 = np.log(prior.a) + prior.a * np.log(prior.b) - (prior.a + 1) * np.log(prior.b + s)
        l0 = np.log(prior.a_bar) + prior.a_bar * np.log(prior.b_bar) - (prior.a_bar + 1) * np.log(prior.b_bar + s)
        return np.sum(l1 - l0, axis=0)
    m, v = coefficient_messages(state)
    out = np.zeros(m.shape)
    ok = np.isfinite(v)
    if np.any(ok):
        m2 = np.abs(m[ok]) ** 2
        out[ok] = _log_marginal(m2, v[ok], prior.a, prior.b) - _log_marginal(m2, v[ok], prior.a_bar, prior.b_bar)
    return np.sum(out, axis=0)


def _logit(p):
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return np.log(p) - np.log1p(-p)


def update_support_posterior(state: VbiState, prior: LayeredPrior, evidence: str = "extrinsic"):
    """Combine the chain message ``nu_prior`` with the current evidence."""
    state.llr = support_llr(state, prior, evidence)
    state.log_odds = _logit(state.nu_prior) + state.llr
    state.nu_post = expit(state.log_odds)
    return state.nu_post


# ---------------------------------------------------------------------------
# Entity B


def forward_backward(llr, p01: float, p10: float, pi1: float | None = None, return_log_odds: bool = False):
    """Posterior marginals of a two-state Markov chain with local evidence ``llr``.

    ``llr[n] = log p(obs_n | alpha_n = 1) - log p(obs_n | alpha_n = 0)``.
    Returns ``(posterior, extrinsic)``, the latter being the chain's message to
    each node with its own evidence removed.  Computed in the log domain;
    ``return_log_odds`` returns both as log-odds instead of probabilities.
    """
    llr = np.asarray(llr, dtype=float)
    K = llr.size
    if K == 0:
        return np.zeros(0), np.zeros(0)
    pi1 = p01 / (p01 + p10) if pi1 is None else pi1
    l00, l01, l10, l11 = np.log([1 - p01, p01, p10, 1 - p10])
    lae = np.logaddexp
    fwd = np.empty((K, 2))
    bwd = np.zeros((K, 2))
    f0, f1 = np.log(1 - pi1), np.log(pi1) + llr[0]
    fwd[0] = f0, f1
    for n in range(1, K):
        f0, f1 = lae(f0 + l00, f1 + l10), lae(f0 + l01, f1 + l11) + llr[n]
        c = max(f0, f1)
        f0, f1 = f0 - c, f1 - c
        fwd[n] = f0, f1
    b0 = b1 = 0.0
    for n in range(K - 2, -1, -1):
        e1 = llr[n + 1] + b1
        b0, b1 = lae(l00 + b0, l01 + e1), lae(l10 + b0, l11 + e1)
        c = max(b0, b1)
        b0, b1 = b0 - c, b1 - c
        bwd[n] = b0, b1
    post = fwd + bwd
    log_odds = post[:, 1] - post[:, 0]
    if return_log_odds:
        return log_odds, log_odds - llr
    return expit(log_odds), expit(log_odds - llr)


def update_alpha_and_messages(state: VbiState, prior: LayeredPrior, segments=None, evidence: str = "extrinsic") -> np.ndarray:
    """Entity A -> B -> A exchange.

    Entity A's evidence ``llr`` is passed through the forward-backward
    recursion on every chain segment; the extrinsic output becomes the new
    support prior and the posterior is refreshed.  Returns ``nu_post``.
    """
    state.llr = support_llr(state, prior, evidence)
    segments = segments or [slice(0, state.llr.size)]
    post = np.empty_like(state.llr)
    ext = np.empty_like(state.llr)
    for s in segments:
        post[s], ext[s] = forward_backward(state.llr[s], prior.p01, prior.p10, return_log_odds=True)
    state.log_odds = post
    state.nu_post = expit(post)
    state.nu_prior = expit(ext)
    return state.nu_post


def e_step(state: VbiState, problem: CsProblem, prior: LayeredPrior, sweeps: int = 5, A=None, update_support=False, kappa_rule: str = "conjugate"):
    """``sweeps`` rounds of the u, kappa and rho updates at fixed offsets.

    With ``update_support`` the support posterior is refreshed from the block
    evidence inside each sweep (the chain message ``nu_prior`` is held fixed).
    """
    if A is None:
        A = effective_dictionary(problem, state.offsets)
    for _ in range(sweeps):
        update_u(state, problem, A)
        update_kappa(state, problem, prior, A, kappa_rule)
        if update_support:
            update_support_posterior(state, prior)
        update_rho(state, prior)
    return state


def elbo(state: VbiState, problem: CsProblem, prior: LayeredPrior, A=None) -> float:
    """Evidence lower bound of ``q(u) q(rho) q(kappa)`` for the current ``nu_post``.

    The support enters through the expected log prior
    ``nu log Gamma(rho; a, b) + (1 - nu) log Gamma(rho; a_bar, b_bar)``.
    The bound is taken without the ``<kappa>`` cap.
    """
    L, M = problem.observations.shape
    K = state.mu.shape[1]
    e_k = state.kappa_a / state.kappa_b
    e_lnk = digamma(state.kappa_a) - np.log(state.kappa_b)
    e_rho = state.a_tilde / state.b_tilde
    e_lnrho = digamma(state.a_tilde) - np.log(state.b_tilde)
    s = second_moment(state)
    nu = state.nu_post[None, :]
    out = L * M * (e_lnk - np.log(np.pi)) - e_k * residual_power(state, problem, A)
    out += np.sum(e_lnrho - np.log(np.pi) - e_rho * s)

    def gamma_lp(a, b):
        return a * np.log(b) - gammaln(a) + (a - 1) * e_lnrho - b * e_rho

    out += np.sum(nu * gamma_lp(prior.a, prior.b) + (1 - nu) * gamma_lp(prior.a_bar, prior.b_bar))
    out += prior.a_kappa * np.log(prior.b_kappa) - gammaln(prior.a_kappa) + (prior.a_kappa - 1) * e_lnk - prior.b_kappa * e_k
    logdet = np.linalg.slogdet(state.sigma)[1]
    out += np.sum(K * np.log(np.pi * np.e) + logdet)
    a_t, b_t = state.a_tilde, state.b_tilde
    out += np.sum(a_t - np.log(b_t) + gammaln(a_t) + (1 - a_t) * digamma(a_t))
    ak, bk = state.kappa_a, state.kappa_b
    out += ak - np.log(bk) + gammaln(ak) + (1 - ak) * digamma(ak)
    return float(out)


# ---------------------------------------------------------------------------
# M-step


def surrogate(state: VbiState, problem: CsProblem, offsets=None) -> float:
    """Offset-dependent part of ``E_q[log p(y | u; offsets)]``."""
    return -state.kappa * residual_power(state, problem, offsets=state.offsets if offsets is None else offsets)


def surrogate_gradient(state: VbiState, problem: CsProblem, offsets=None, columns=None):
    """Analytic gradient of :func:`surrogate` and its Gauss-Newton curvature.

    Returns ``(grad, curv)`` with ``curv`` the diagonal of the Gauss-Newton
    matrix, or, when ``columns`` is given, ``(grad, H)`` with the full
    Gauss-Newton matrix restricted to those columns,
    ``H_ij = 2 kappa sum_l Re(E[u_i^* u_j] d_i^H d_j)``.
    """
    offsets = state.offsets if offsets is None else offsets
    A, D = effective_dictionary(problem, offsets, derivative=True)
    Y = problem.observations / state.scale
    r = Y - np.einsum("lmk,lk->lm", A, state.mu)
    t1 = 2 * np.real(state.mu * np.einsum("lm,lmk->lk", np.conj(r), D))
    AHD = np.conj(np.swapaxes(A, 1, 2)) @ D
    t2 = 2 * np.real(np.einsum("lnj,ljn->ln", state.sigma, AHD))
    k = state.kappa
    grad = k * np.sum(t1 - t2, axis=0)
    if columns is not None:
        c = np.asarray(columns)
        Dc = D[:, :, c]
        mc = state.mu[:, c]
        Euu = np.conj(mc)[:, :, None] * mc[:, None, :] + np.swapaxes(state.sigma[:, c[:, None], c[None, :]], 1, 2)
        DHD = np.conj(np.swapaxes(Dc, 1, 2)) @ Dc
        return grad, 2 * k * np.real(np.sum(Euu * DHD, axis=0))
    curv = 2 * k * np.sum(second_moment(state) * np.sum(np.abs(D) ** 2, axis=1), axis=0)
    return grad, curv


@dataclass
class StepInfo:
    accepted: bool
    step: float
    f_old: float
    f_new: float
    backtracks: int
    pushed: np.ndarray | None = None  # columns whose step was cut by the cell bound


def _profile_fit(state: VbiState, problem: CsProblem, offsets, cols):
    """Least-squares coefficients of the active columns and the residual, per line."""
    A = effective_dictionary(problem, offsets)
    Y = problem.observations / state.scale
    Aa = A[:, :, cols]
    AaH = np.conj(np.swapaxes(Aa, 1, 2))
    G = AaH @ Aa
    G += 1e-12 * np.trace(G, axis1=1, axis2=2).real[:, None, None] * np.eye(cols.size)
    u = np.linalg.solve(G, AaH @ Y[:, :, None])[:, :, 0]
    r = Y - np.einsum("lmk,lk->lm", Aa, u)
    return A, Aa, u, r


def profile_objective(state: VbiState, problem: CsProblem, offsets, cols) -> float:
    """``-kappa sum_l min_u |y_l - A_l u|^2`` over the active columns ``cols``."""
    return -state.kappa * float(np.sum(np.abs(_profile_fit(state, problem, offsets, cols)[3]) ** 2))


def profile_gradient(state: VbiState, problem: CsProblem, offsets, cols):
    """Gradient of :func:`profile_objective` and its Gauss-Newton matrix.

    The derivative atoms are projected onto the orthogonal complement of the
    active atoms, so the curvature accounts for the coefficients following
    the offsets.
    """
    _, Aa, u, r = _profile_fit(state, problem, offsets, cols)
    _, D = effective_dictionary(problem, offsets, derivative=True)
    Dc = D[:, :, cols]
    k = state.kappa
    grad = np.zeros(state.offsets.size)
    grad[cols] = 2 * k * np.sum(np.real(u * np.einsum("lm,lmk->lk", np.conj(r), Dc)), axis=0)
    AaH = np.conj(np.swapaxes(Aa, 1, 2))
    G = AaH @ Aa
    G += 1e-12 * np.trace(G, axis1=1, axis2=2).real[:, None, None] * np.eye(cols.size)
    Dp = Dc - Aa @ np.linalg.solve(G, AaH @ Dc)
    Euu = np.conj(u)[:, :, None] * u[:, None, :]
    H = 2 * k * np.real(np.sum(Euu * (np.conj(np.swapaxes(Dp, 1, 2)) @ Dp), axis=0))
    return grad, H


def profile_noise_update(state: VbiState, problem: CsProblem, prior: LayeredPrior):
    """Reset ``q(kappa)`` from the least-squares residual on the gated support.

    Shrinkage of weak coefficients inflates the mean-field residual, which
    lowers ``<kappa>`` and shrinks them further; the least-squares residual at
    the current support and offsets breaks that loop.
    """
    cols = np.flatnonzero(state.gate)
    if cols.size == 0:
        return
    L, M = problem.observations.shape
    r = _profile_fit(state, problem, state.offsets, cols)[3]
    dof = max(L * (M - cols.size), 1)
    state.kappa_a = prior.a_kappa + dof
    state.kappa_b = prior.b_kappa + float(np.sum(np.abs(r) ** 2))


def mm_gradient_step(state: VbiState, problem: CsProblem, cfg: SolverConfig | None = None, mask=None):
    """One Armijo-safeguarded ascent step on the offsets.

    With a support gate and ``cfg.m_objective == "profile"`` the objective is
    the variable-projection profile of the active columns; otherwise it is the
    expected log-likelihood at the current ``q(u)``.  The search direction is
    the gradient scaled by the inverse Gauss-Newton matrix (full for at most
    ``cfg.full_newton_max`` columns, diagonal beyond).  Only coordinates in
    ``mask`` move; the result is clipped to half a grid cell.  Returns
    ``(offsets, info)`` and updates ``state.offsets`` when a step is accepted.
    """
    cfg = cfg or SolverConfig()
    if mask is None:
        mask = np.ones(state.offsets.size, bool)
    cols = np.flatnonzero(mask)
    use_profile = cfg.m_objective == "profile" and state.gate is not None and 0 < cols.size <= cfg.full_newton_max
    full = cfg.precondition and cols.size <= cfg.full_newton_max
    if use_profile:
        grad, curv = profile_gradient(state, problem, state.offsets, cols)

        def objective(off):
            return profile_objective(state, problem, off, cols)

    else:
        grad, curv = surrogate_gradient(state, problem, columns=cols if full else None)

        def objective(off):
            return surrogate(state, problem, off)

    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite offset gradient")
    d = np.where(mask, grad, 0.0)
    if full and cols.size:
        H = curv + 1e-12 * max(float(np.trace(curv)), 1e-300) * np.eye(cols.size)
        try:
            d = np.zeros_like(grad)
            d[cols] = np.linalg.solve(H, grad[cols])
        except np.linalg.LinAlgError:
            d = np.where(mask, grad / np.maximum(np.diag(H), 1e-300), 0.0)
    elif cfg.precondition:
        floor = 1e-12 * max(float(curv.max()), 1e-300)
        d = np.where(mask, grad / np.maximum(curv, floor), 0.0)
    slope = float(grad @ d)
    f0 = objective(state.offsets)
    if slope <= 0:
        return state.offsets, StepInfo(False, 0.0, f0, f0, 0)
    model = problem.model
    t = cfg.armijo_step
    for k in range(cfg.max_backtracks + 1):
        cand = model.clip(state.offsets + t * d)
        f1 = objective(cand)
        # sufficient increase measured along the projected step
        gain = float(grad @ (cand - state.offsets))
        if f1 >= f0 + cfg.armijo_c * gain and f1 >= f0:
            pushed = mask & (np.abs(cand - (state.offsets + t * d)) > 1e-12)
            state.offsets = cand
            return cand, StepInfo(True, t, f0, f1, k, pushed)
        t *= cfg.armijo_shrink
    return state.offsets, StepInfo(False, 0.0, f0, f0, cfg.max_backtracks)


# ---------------------------------------------------------------------------
# driver


def active_set(log_odds, n_active: int | None, segments=None, rule: str = "top") -> np.ndarray:
    """Indices of the active blocks, ranked by support log-odds.

    With several chain segments (distance union model) the best block of each
    segment is returned.
    """
    nu = np.asarray(log_odds)
    if segments is not None and len(segments) > 1:
        return np.array([s.start + int(np.argmax(nu[s])) for s in segments])
    if rule == "threshold" or n_active is None:
        return np.flatnonzero(nu > 0)
    order = np.argsort(-nu, kind="stable")
    return np.sort(order[:n_active])


def _update_mask(state: VbiState, n_active, segments):
    lo = state.log_odds
    if segments is not None and len(segments) > 1:
        # one column per path
        mask = np.zeros_like(lo, bool)
        for s in segments:
            mask[s.start + int(np.argmax(lo[s]))] = True
        return mask
    k = n_active if n_active is not None else int(np.sum(lo > 0))
    if k == 0:
        return np.ones_like(lo, bool)
    mask = np.zeros_like(lo, bool)
    mask[np.argsort(-lo, kind="stable")[:k]] = True
    return mask


def merge_duplicates(state: VbiState, problem: CsProblem, tol: float = 0.5) -> int:
    """Merge gated columns of one segment that describe the same path.

    Two active columns closer than ``tol`` grid spacings (in the phase
    coordinate) are replaced by the stronger one, moved to their
    energy-weighted position; the other is gated off.  Returns the number of
    merges.
    """
    if state.gate is None:
        return 0
    model = problem.model
    pos = model.phase_coords(state.offsets)
    spacing = model.spacings()
    energy = second_moment(state).sum(axis=0)
    segs = model.segments if model.dimension == "r" else [slice(0, model.n_columns)]
    merges = 0
    period = 2.0 if model.dimension in ("theta", "zeta") else None
    for seg in segs:
        cols = [c for c in range(seg.start, seg.stop) if state.gate[c]]
        merged = True
        while merged:
            merged = False
            for i, a in enumerate(cols):
                for b in cols[i + 1:]:
                    gap = abs(pos[a] - pos[b])
                    if period is not None:
                        # cos/sin = +-1 give the same atom at half-wavelength phase steps
                        gap = min(gap, period - gap)
                    if gap >= tol * spacing[a]:
                        continue
                    keep, drop = (a, b) if energy[a] >= energy[b] else (b, a)
                    w = energy[a] + energy[b]
                    other = pos[drop]
                    if period is not None and abs(other - pos[keep]) > 1.0:
                        other += period if other < pos[keep] else -period
                    target = (energy[keep] * pos[keep] + energy[drop] * other) / w if w > 0 else pos[keep]
                    state.offsets[keep] = model.offset_at(keep, target)
                    pos[keep] = model.phase_coords(state.offsets)[keep]
                    energy[keep] = w
                    state.gate[drop] = False
                    state.offsets[drop] = 0.0
                    state.log_odds[drop] = min(state.log_odds[drop], 0.0)
                    cols.remove(drop)
                    merges += 1
                    merged = True
                    break
                if merged:
                    break
    return merges


def hand_off(state: VbiState, problem: CsProblem, pushed) -> int:
    """Move the support of a column pushed against its cell bound to the neighbour.

    The neighbouring column takes over at the same continuous position, so the
    next M-step can continue into its cell.  Returns the number of hand-offs.
    """
    if state.gate is None or pushed is None or not np.any(pushed):
        return 0
    model = problem.model
    pos = model.phase_coords(state.offsets)
    energy = second_moment(state).sum(axis=0)
    moves = 0
    for seg in model.segments if model.dimension == "r" else [slice(0, model.n_columns)]:
        for c in range(seg.start, seg.stop):
            if not (pushed[c] and state.gate[c]):
                continue
            up = pos[c] > model.coords[c]
            n = c + (1 if up else -1)
            target = pos[c]
            if n < seg.start or n >= seg.stop:
                if model.dimension == "r":
                    continue
                # the phase is 2-periodic in cos/sin: continue from the opposite end
                n = seg.start if up else seg.stop - 1
                target = pos[c] - 2.0 if up else pos[c] + 2.0
                # keep clear of +-1, where the angle derivative of the phase vanishes
                edge = 1.0 - 0.25 * model.spacings()[n]
                target = float(np.clip(target, -edge, edge))
            if state.gate[n] and energy[n] >= energy[c]:
                # the neighbour already carries the path: just drop this column
                state.gate[c] = False
                state.offsets[c] = 0.0
                moves += 1
                continue
            state.offsets[n] = model.offset_at(n, target)
            state.offsets[c] = 0.0
            state.gate[n], state.gate[c] = True, False
            state.log_odds[n], state.log_odds[c] = state.log_odds[c], state.log_odds[n]
            moves += 1
    return moves


def _ls_residual(problem: CsProblem, A, Y, cols) -> float:
    Aa = A[:, :, cols]
    AaH = np.conj(np.swapaxes(Aa, 1, 2))
    G = AaH @ Aa
    G += 1e-12 * np.trace(G, axis1=1, axis2=2).real[:, None, None] * np.eye(cols.size)
    u = np.linalg.solve(G, AaH @ Y[:, :, None])[:, :, 0]
    return float(np.sum(np.abs(Y - np.einsum("lmk,lk->lm", Aa, u)) ** 2))


def accept_mask(state: VbiState, problem: CsProblem, proposal) -> np.ndarray:
    """Keep the current gate unless ``proposal`` lowers the least-squares residual.

    Columns entering the support are evaluated at their grid point.
    """
    proposal = np.asarray(proposal, bool)
    if state.gate is None or np.array_equal(proposal, state.gate):
        return proposal
    if proposal.sum() != state.gate.sum():
        return proposal
    Y = problem.observations / state.scale
    old = effective_dictionary(problem, state.offsets)
    off = np.where(proposal & ~state.gate, 0.0, state.offsets)
    new = effective_dictionary(problem, off)
    e_old = _ls_residual(problem, old, Y, np.flatnonzero(state.gate))
    e_new = _ls_residual(problem, new, Y, np.flatnonzero(proposal))
    return proposal if e_new < e_old else state.gate.copy()


def _cell_offsets(model, fraction: float) -> np.ndarray:
    """Offsets placing every angle column ``fraction`` of a cell from its grid point."""
    c = model.coords
    t = np.clip(c + fraction * model.spacings(), -1.0, 1.0)
    if model.dimension == "theta":
        off = np.arccos(t) - np.arccos(c)
    else:
        off = np.arcsin(t) - np.arcsin(c)
    return model.clip(off)


_SWAP_FRACTIONS = np.linspace(-0.45, 0.45, 7)
_REFINE_CFG = SolverConfig()


def swap_support(
    state: VbiState, problem: CsProblem, min_gain: float = 1e-3, n_candidates: int = 3, n_active=None, refine_steps: int = 3
) -> int:
    """Exchange one gated column for a column matched to the residual.

    Two nearly collinear columns can describe one off-grid path with large
    opposite coefficients; their evidence then stays high while a second path
    is left in the residual.  The ``n_candidates`` columns with the largest
    normalized residual correlation (summed over lines, best position inside
    the cell) are tried in place of every gated column, each trial support
    getting ``refine_steps`` profile Gauss-Newton steps; the best exchange is
    kept if the least-squares residual drops by more than ``min_gain``
    relative.  When merges left fewer than ``n_active`` gated columns the best
    candidate is added instead.  Returns 1 on a change, else 0.
    """
    if state.gate is None:
        return 0
    model = problem.model
    if model.dimension == "r":
        return 0
    cols = np.flatnonzero(state.gate)
    if cols.size == 0:
        return 0
    A = effective_dictionary(problem, state.offsets)
    Y = problem.observations / state.scale
    r = _profile_fit(state, problem, state.offsets, cols)[3]
    base = float(np.sum(np.abs(r) ** 2))
    if base <= 0:
        return 0
    K = model.n_columns
    best_corr = np.full(K, -np.inf)
    best_off = np.zeros(K)
    for f in _SWAP_FRACTIONS:
        off = _cell_offsets(model, f)
        Af = effective_dictionary(problem, off)
        norm = np.maximum(np.sum(np.abs(Af) ** 2, axis=1), 1e-300)
        corr = np.sum(np.abs(np.einsum("lmk,lm->lk", np.conj(Af), r)) ** 2 / norm, axis=0)
        better = corr > best_corr
        best_corr[better] = corr[better]
        best_off[better] = off[better]
    best_corr[cols] = -np.inf
    cands = [int(k) for k in np.argsort(-best_corr)[:n_candidates] if np.isfinite(best_corr[k])]
    if not cands:
        return 0
    if n_active is not None and cols.size < n_active:
        k = cands[0]
        state.gate[k] = True
        state.offsets[k] = best_off[k]
        state.log_odds[k] = max(state.log_odds[k], 0.0)
        return 1
    trial_off = state.offsets.copy()
    trial_off[cands] = best_off[cands]
    best, move = base, None
    tmp = replace(state, gate=state.gate.copy(), offsets=trial_off, history=[])
    for k in cands:
        for j in cols:
            mask = state.gate.copy()
            mask[j], mask[k] = False, True
            tmp.gate = mask
            tmp.offsets = np.where(mask, trial_off, 0.0)
            for _ in range(refine_steps):
                if not mm_gradient_step(tmp, problem, _REFINE_CFG, mask)[1].accepted:
                    break
            e = _ls_residual(problem, effective_dictionary(problem, tmp.offsets), Y, np.flatnonzero(mask))
            if e < best:
                best, move = e, (j, k, tmp.offsets.copy())
    if move is None or best > (1 - min_gain) * base:
        return 0
    drop, k, off = move
    state.gate[drop], state.gate[k] = False, True
    state.offsets = off
    state.log_odds[drop], state.log_odds[k] = state.log_odds[k], state.log_odds[drop]
    return 1


@dataclass
class VbiResult:
    mu: np.ndarray  # lines x K, original scale
    sigma: np.ndarray
    nu: np.ndarray
    offsets: np.ndarray
    support: np.ndarray  # sorted indices of the active columns
    n_iter: int
    converged: bool
    state: VbiState


def iterate_dere_vm(problem: CsProblem, prior: LayeredPrior, cfg: SolverConfig, n_active=None, state=None):
    """Generator over outer iterations; yields the state after each E/M round."""
    state = init_state(problem, prior, cfg) if state is None else state
    segments = problem.model.segments if problem.model.dimension == "r" else None
    while state.iteration < cfg.r_max:
        mu_old, sig_old = state.mu.copy(), state.sigma.copy()
        A = effective_dictionary(problem, state.offsets)
        e_step(state, problem, prior, cfg.inner_e_sweeps, A, kappa_rule=cfg.kappa_rule)
        update_alpha_and_messages(state, prior, segments, cfg.evidence)
        mask = _update_mask(state, n_active, segments)
        if cfg.gate_support:
            if cfg.swap_support:
                mask = accept_mask(state, problem, mask)
            if state.gate is not None:
                # columns entering the support start from their grid point
                state.offsets[mask & ~state.gate] = 0.0
            state.gate = mask
        update_rho(state, prior)
        _, info = mm_gradient_step(state, problem, cfg, mask)
        if cfg.gate_support:
            hand_off(state, problem, info.pushed)
            if cfg.merge_tol > 0:
                merge_duplicates(state, problem, cfg.merge_tol)
            if cfg.swap_support:
                swap_support(state, problem, cfg.swap_gain, n_active=n_active)
            if cfg.profile_kappa:
                profile_noise_update(state, problem, prior)
        state.iteration += 1
        dmu = np.linalg.norm(state.mu - mu_old) / max(np.linalg.norm(state.mu), 1e-300)
        dsig = np.linalg.norm(state.sigma - sig_old) / max(np.linalg.norm(state.sigma), 1e-300)
        state.history.append((dmu, dsig, info))
        if state.gate is not None:
            state.trace.append((state.gate.copy(), state.offsets.copy()))
        yield state


def _converged(state: VbiState, cfg: SolverConfig) -> bool:
    if not state.history:
        return False
    dmu, dsig, _ = state.history[-1]
    return dmu <= cfg.eps_mu and dsig <= cfg.eps_sigma


def _cycled(state: VbiState, problem: CsProblem, max_lag: int = 4, tol: float = 1e-3) -> bool:
    """True when the gate and offsets repeat a state from 2..``max_lag`` iterations ago.

    Hand-offs across a cell boundary can settle into a short limit cycle under
    noise; the iteration is stopped there.
    """
    tr = state.trace
    if len(tr) < 3:
        return False
    gate, off = tr[-1]
    spacing = problem.model.spacings()
    for lag in range(2, min(max_lag, len(tr) - 1) + 1):
        g0, o0 = tr[-1 - lag]
        if np.array_equal(gate, g0) and np.all(np.abs(off - o0)[gate] <= tol * spacing[gate]):
            return True
    return False


def finalize(problem: CsProblem, state: VbiState, n_active, cfg: SolverConfig, prior: LayeredPrior | None = None) -> VbiResult:
    """Final E-step at the current offsets and extraction of the active set."""
    segments = problem.model.segments if problem.model.dimension == "r" else None
    prior = prior or LayeredPrior()
    e_step(state, problem, prior, cfg.inner_e_sweeps, kappa_rule=cfg.kappa_rule)
    update_alpha_and_messages(state, prior, segments, cfg.evidence)
    if cfg.gate_support and cfg.swap_support and state.gate is not None and segments is None and n_active is not None:
        # the gate is the residual-checked support, topped up by log-odds after merges
        support = np.flatnonzero(state.gate)
        if support.size < n_active:
            rest = np.argsort(-np.where(state.gate, -np.inf, state.log_odds), kind="stable")
            support = np.sort(np.concatenate([support, rest[: n_active - support.size]]))
        elif support.size > n_active:
            support = active_set(state.log_odds, n_active, None, cfg.support_rule)
    else:
        support = active_set(state.log_odds, n_active, segments, cfg.support_rule)
    offsets = np.zeros_like(state.offsets)
    offsets[support] = state.offsets[support]
    s = state.scale
    return VbiResult(
        mu=state.mu * s,
        sigma=state.sigma * s**2,
        nu=state.nu_post.copy(),
        offsets=offsets,
        support=support,
        n_iter=state.iteration,
        converged=_converged(state, cfg),
        state=state,
    )


def run_dere_vm(problem: CsProblem, prior: LayeredPrior | None = None, cfg: SolverConfig | None = None, n_active=None):
    """Alternate E- and M-steps until ``mu`` and ``Sigma`` settle or ``r_max`` is reached."""
    prior = prior or LayeredPrior()
    cfg = cfg or SolverConfig()
    state = None
    for state in iterate_dere_vm(problem, prior, cfg, n_active):
        if _converged(state, cfg) or _cycled(state, problem):
            break
    return finalize(problem, state, n_active, cfg, prior)


__all__ = [
    "LayeredPrior",
    "SolverConfig",
    "VbiState",
    "VbiResult",
    "StepInfo",
    "init_state",
    "effective_dictionary",
    "update_u",
    "update_rho",
    "update_kappa",
    "support_llr",
    "update_support_posterior",
    "forward_backward",
    "update_alpha_and_messages",
    "e_step",
    "elbo",
    "surrogate",
    "surrogate_gradient",
    "mm_gradient_step",
    "active_set",
    "iterate_dere_vm",
    "run_dere_vm",
    "finalize",
]
