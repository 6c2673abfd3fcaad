"""Numerical property checks behind ``ddcpi verify``.

Each check returns a :class:`Check` with the measured residual and the
threshold it must stay under. Checks are deterministic (fixed seeds).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .asymptotics import (
    asy_summary,
    delta_matrix,
    limit_inputs,
    score_identity_check,
    multinomial_cov,
    phi_matrix,
    sigma_matrix,
    upsilon_md,
    upsilon_ml,
    w_amse,
    w_av,
)
from .dgp import (
    QuadraticUtility,
    assemble_joint,
    cumulative_table,
    make_rng,
    marginal_log_spec,
)
from .model import (
    bus_model,
    choice_values,
    dP_dtheta,
    dP_dtheta_resolved,
    jacobian_psi_wrt_P,
    lambda_map,
    solve_ccp_fixed_point,
    solve_value_function,
    tabular_model,
    varphi_map,
)

ALPHA_STAR = np.array([1.0, 0.05])
THETA_F_STAR = np.array([0.25])
SUITES = ("model", "asymptotics", "all")
FAULTS = ("none", "phi")


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value < self.threshold)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48} {self.value:.3e} < {self.threshold:.1e}  ({self.seconds:.2f}s)"


def random_small_model(rng):
    n_states = int(rng.integers(1, 5))
    n_actions = int(rng.integers(2, 4))
    d = int(rng.integers(1, 3))
    feats = rng.normal(size=(n_states, n_actions, d))
    trans = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    beta = float(rng.uniform(0.5, 0.99))
    return tabular_model(feats, trans, beta), rng.normal(size=d)


# ---------------------------------------------------------------------------
# Model suite


def check_zero_jacobian(model=None):
    model = model or bus_model()
    P = solve_ccp_fixed_point(model, ALPHA_STAR, THETA_F_STAR)
    jac = jacobian_psi_wrt_P(model, ALPHA_STAR, THETA_F_STAR, P)
    return float(np.max(np.abs(jac)))


def check_zero_jacobian_random(n_models=20, seed=7):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        model, alpha = random_small_model(rng)
        P = solve_ccp_fixed_point(model, alpha, [])
        worst = max(worst, float(np.max(np.abs(jacobian_psi_wrt_P(model, alpha, [], P)))))
    return worst


def check_fixed_point_starts(n_starts=10, seed=11, tol=1e-12):
    model = bus_model()
    rng = make_rng(seed)
    sols = []
    for _ in range(n_starts):
        P0 = rng.dirichlet(np.ones(model.n_actions), size=model.n_states)
        P0 = np.clip(P0, 1e-3, None)
        P0 /= P0.sum(axis=1, keepdims=True)
        sols.append(solve_ccp_fixed_point(model, ALPHA_STAR, THETA_F_STAR, P0=P0, tol=tol))
    return max(float(np.max(np.abs(a - b))) for a in sols for b in sols)


def check_value_vs_policy_iteration():
    model = bus_model()
    P = solve_ccp_fixed_point(model, ALPHA_STAR, THETA_F_STAR)
    V = solve_value_function(model, ALPHA_STAR, THETA_F_STAR)
    return float(np.max(np.abs(lambda_map(choice_values(model, ALPHA_STAR, THETA_F_STAR, V)) - P)))


def check_fixed_point_derivative():
    model = bus_model()
    fast = dP_dtheta(model, ALPHA_STAR, THETA_F_STAR)
    full = dP_dtheta_resolved(model, ALPHA_STAR, THETA_F_STAR)
    return float(np.max(np.abs(fast - full)))


def check_alpha_linearity():
    model = bus_model()
    P = solve_ccp_fixed_point(model, ALPHA_STAR, THETA_F_STAR)

    def v(alpha):
        return choice_values(model, alpha, THETA_F_STAR, varphi_map(model, alpha, THETA_F_STAR, P))

    a1, a2 = np.array([0.7, 0.02]), np.array([-0.3, 0.08])
    resid = v(a1 + a2) - v(a1) - v(a2) + v(np.zeros(2))
    # values are O(1 / (1 - beta)); compare on that scale
    return float(np.max(np.abs(resid)) / max(1.0, np.max(np.abs(v(a1)))))


# ---------------------------------------------------------------------------
# Asymptotics suite


def _bus_inputs(design=None):
    model = bus_model()
    return model, limit_inputs(model, design or QuadraticUtility(delta=0.5))


def check_score_identities(model, inputs):
    return max(score_identity_check(model, inputs))


def check_sigma_annihilates_j(inputs):
    sigma = sigma_matrix(inputs.p_star, inputs.m_star)
    return float(np.max(np.abs(sigma @ inputs.j_star)))


def check_ml_equals_md_phi(inputs, fault="none"):
    phi = phi_matrix(inputs.p_star, inputs.m_star)
    sigma = sigma_matrix(inputs.p_star, inputs.m_star)
    phi_ml = phi.copy()
    if fault == "phi":
        # scale one state's block; a global rescaling would cancel
        phi_ml[0, 0] *= 1.01
    a = upsilon_ml(inputs.dP_dalpha, inputs.dP_dthetaf, phi_ml, sigma)
    b = upsilon_md(inputs.dP_dalpha, inputs.dP_dthetaf, phi, sigma)
    return float(np.max(np.abs(a - b)))


def psd_violation(big, small):
    """How far ``big - small`` is from positive semidefinite, relative to ``big``."""
    eig = np.linalg.eigvalsh(0.5 * ((big - small) + (big - small).T))
    return float(max(0.0, -eig[0]) / max(1.0, np.max(np.abs(big))))


def check_av_ordering(inputs):
    sigma = sigma_matrix(inputs.p_star, inputs.m_star)
    eye = np.eye(sigma.shape[0])
    s_opt = asy_summary(inputs, upsilon_md(inputs.dP_dalpha, inputs.dP_dthetaf, w_av(inputs), sigma))
    s_eye = asy_summary(inputs, upsilon_md(inputs.dP_dalpha, inputs.dP_dthetaf, eye, sigma))
    return psd_violation(s_eye.AV, s_opt.AV)


def check_amse_ordering(inputs):
    sigma = sigma_matrix(inputs.p_star, inputs.m_star)
    s_opt = asy_summary(inputs, upsilon_md(inputs.dP_dalpha, inputs.dP_dthetaf, w_amse(inputs), sigma), 0.5)
    s_av = asy_summary(inputs, upsilon_md(inputs.dP_dalpha, inputs.dP_dthetaf, w_av(inputs), sigma), 0.5)
    return psd_violation(s_av.AMSE, s_opt.AMSE)


def check_amse_weight_condition(inputs):
    """``G' W_AMSE`` equals ``G'`` times the inverse bracket (class condition
    with the identity as the free matrix)."""
    sigma = sigma_matrix(inputs.p_star, inputs.m_star)
    Delta = delta_matrix(inputs.dG1_dPi, inputs.n_actions, inputs.n_states)
    L = np.hstack([sigma, -inputs.dP_dthetaf]) @ Delta
    bracket = L @ (multinomial_cov(inputs.pi_star) + np.outer(inputs.B, inputs.B)) @ L.T
    lhs = inputs.dP_dalpha.T @ w_amse(inputs)
    rhs = np.linalg.solve(bracket, inputs.dP_dalpha).T
    return float(np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(rhs))))


def clt_check(S=5000, n=1000, seed=2024):
    """Largest standardized deviation of the simulated covariance of
    ``sqrt(n) (pi_hat - pi)`` from ``diag(pi) - pi pi'`` over support cells."""
    model = bus_model()
    P = solve_ccp_fixed_point(model, ALPHA_STAR, THETA_F_STAR)
    pi = assemble_joint(model.kernel(THETA_F_STAR), P, marginal_log_spec(model.n_states))
    support = np.flatnonzero(pi > 0)
    cdf = cumulative_table(pi)
    rng = make_rng(seed)
    cells = np.searchsorted(cdf, rng.random((S, n)), side="right")
    cells = np.minimum(cells, pi.size - 1)
    offsets = (np.arange(S) * pi.size)[:, None]
    counts = np.bincount((cells + offsets).ravel(), minlength=S * pi.size).reshape(S, pi.size)
    z = np.sqrt(n) * (counts[:, support] / n - pi[support])
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / (S - 1)
    target = multinomial_cov(pi[support])
    # Var of each product term gives the SE of each covariance entry
    second = (zc**2).T @ (zc**2) / (S - 1)
    se = np.sqrt(np.maximum(second - cov**2, 1e-300) / S)
    return float(np.max(np.abs(cov - target) / se))


# ---------------------------------------------------------------------------


def _timed(name, fn, threshold):
    t0 = time.perf_counter()
    value = fn()
    return Check(name, value, threshold, time.perf_counter() - t0)


def run_suite(suite="all", fault="none"):
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    checks = []
    if suite in ("model", "all"):
        checks += [
            _timed("zero Jacobian at the fixed point (bus)", check_zero_jacobian, 1e-5),
            _timed("zero Jacobian at the fixed point (random)", check_zero_jacobian_random, 1e-5),
            _timed("fixed point agreement over 10 starts", check_fixed_point_starts, 1e-10),
            _timed("value iteration vs policy iteration CCPs", check_value_vs_policy_iteration, 1e-8),
            _timed("fixed-point derivative vs full re-solve", check_fixed_point_derivative, 1e-4),
            _timed("choice values affine in alpha", check_alpha_linearity, 1e-10),
        ]
    if suite in ("asymptotics", "all"):
        model, inputs = _bus_inputs()
        checks += [
            _timed("log-CCP score/information identities", lambda: check_score_identities(model, inputs), 1e-6),
            _timed("Sigma times J* vanishes", lambda: check_sigma_annihilates_j(inputs), 1e-12),
            _timed("ML sandwich equals MD with weight Phi",
                   lambda: check_ml_equals_md_phi(inputs, fault), 1e-10),
            _timed("AV(W_AV) <= AV(I) in PSD order", lambda: check_av_ordering(inputs), 1e-10),
            _timed("AMSE(W_AMSE) <= AMSE(W_AV) in PSD order", lambda: check_amse_ordering(inputs), 1e-10),
            _timed("W_AMSE optimality condition", lambda: check_amse_weight_condition(inputs), 1e-8),
            _timed("CLT covariance (max |dev| / SE, 5000 reps)", clt_check, 5.0),
        ]
    return checks

