import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derevm import LayeredPrior, SolverConfig, assemble_cs_problem, build_covariance_set, sample_pathset
from derevm.vbi import forward_backward, init_state, run_dere_vm, surrogate, surrogate_gradient, update_u


def enumerated_marginals(llr, p01, p10):
    """Brute-force posterior ``P(alpha_n = 1)`` over all ``2^K`` chains."""
    K = len(llr)
    pi1 = p01 / (p01 + p10)
    T = np.array([[1 - p01, p01], [p10, 1 - p10]])
    num, z = np.zeros(K), 0.0
    for s in itertools.product((0, 1), repeat=K):
        lp = np.log(pi1 if s[0] else 1 - pi1)
        lp += sum(np.log(T[s[i - 1], s[i]]) for i in range(1, K))
        lp += sum(l for l, b in zip(llr, s) if b)
        w = np.exp(lp)
        z += w
        num += w * np.array(s)
    return num / z


@settings(max_examples=30, deadline=None)
@given(
    llr=st.lists(st.floats(-8, 8), min_size=1, max_size=8),
    p01=st.floats(0.02, 0.98),
    p10=st.floats(0.02, 0.98),
)
def test_forward_backward_matches_enumeration(llr, p01, p10):
    post, _ = forward_backward(np.array(llr), p01, p10)
    np.testing.assert_allclose(post, enumerated_marginals(llr, p01, p10), atol=1e-9)


def test_extrinsic_excludes_own_evidence():
    rng = np.random.default_rng(0)
    llr = rng.normal(0, 2, 8)
    post, ext = forward_backward(llr, 0.1, 0.6, return_log_odds=True)
    # posterior log-odds = extrinsic + local evidence
    np.testing.assert_allclose(post, ext + llr, atol=1e-10)
    llr2 = llr.copy()
    llr2[3] += 5.0
    _, ext2 = forward_backward(llr2, 0.1, 0.6, return_log_odds=True)
    assert ext2[3] == pytest.approx(ext[3])


@pytest.fixture(scope="module")
def zeta_problem():
    from derevm import UpaConfig

    cfg = UpaConfig.desk()
    ps = sample_pathset(cfg, 3, 3)
    return assemble_cs_problem(build_covariance_set(cfg, ps), "zeta", B_seed=4, cfg=cfg)


def test_surrogate_gradient_matches_finite_differences(zeta_problem):
    prob = zeta_problem
    st_ = init_state(prob, LayeredPrior(), SolverConfig())
    update_u(st_, prob)
    rng = np.random.default_rng(9)
    st_.offsets = prob.model.clip(rng.uniform(-0.01, 0.01, st_.offsets.size))
    g, _ = surrogate_gradient(st_, prob)
    h = 1e-6
    fd = np.empty_like(g)
    for i in range(g.size):
        e = np.zeros_like(g)
        e[i] = h
        fd[i] = (surrogate(st_, prob, st_.offsets + e) - surrogate(st_, prob, st_.offsets - e)) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_solver_returns_requested_support(zeta_problem):
    res = run_dere_vm(zeta_problem, LayeredPrior(), SolverConfig(), 3)
    assert len(res.support) == 3
    assert res.n_iter >= 1


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(support_rule="bogus")
    with pytest.raises(ValueError):
        SolverConfig(armijo_shrink=1.5)


def test_log_marginal_matches_student_t_and_quad():
    from scipy.integrate import quad
    from scipy.special import gammaln

    from derevm.vbi import _log_marginal

    a, b = 0.99, 0.99
    m2 = np.array([0.01, 0.5, 3.0])
    # v -> 0: closed form a b^a / (pi (b + m^2)^(a+1))
    ref = np.log(a) + a * np.log(b) - np.log(np.pi) - (a + 1) * np.log(b + m2)
    np.testing.assert_allclose(_log_marginal(m2, np.full(3, 1e-14), a, b), ref, atol=1e-5)
    v = 0.3

    def integrand(rho, m):
        s = v + 1 / rho
        return np.exp(a * np.log(b) - gammaln(a) + (a - 1) * np.log(rho) - b * rho) * np.exp(-m / s) / (np.pi * s)

    for m in m2:
        exact = np.log(quad(integrand, 0, np.inf, args=(m,), limit=200)[0])
        assert _log_marginal(np.array([m]), np.array([v]), a, b)[0] == pytest.approx(exact, abs=1e-5)


def test_precision_update_is_the_exact_mean_field_posterior():
    """Mean-field ``q(rho)`` by brute force on a grid vs the Gamma update."""
    from derevm.vbi import VbiState, update_rho

    prior = LayeredPrior()
    mu = np.array([[0.3 + 0.4j, 1.5 - 0.2j]])
    sig = np.array([[[0.05, 0], [0, 0.2]]], complex)
    st_ = VbiState.__new__(VbiState)
    st_.mu, st_.sigma = mu, sig
    st_.nu_post = np.array([1.0, 1.0])
    st_.a_tilde, st_.b_tilde = np.zeros((1, 2)), np.zeros((1, 2))
    st_.gate = None
    a_t, b_t = update_rho(st_, prior)
    rho = np.linspace(1e-6, 60, 400_001)
    for k in range(2):
        s = abs(mu[0, k]) ** 2 + sig[0, k, k].real
        # E_q log CN(u; 0, 1/rho) + log Gamma(rho; a, b), up to constants
        logq = np.log(rho) - rho * s + (prior.a - 1) * np.log(rho) - prior.b * rho
        w = np.exp(logq - logq.max())
        mean = np.sum(rho * w) / np.sum(w)
        assert a_t[0, k] / b_t[0, k] == pytest.approx(mean, rel=1e-4)
    # larger coefficients get smaller precision
    assert a_t[0, 1] / b_t[0, 1] < a_t[0, 0] / b_t[0, 0]
