"""Limiting distribution of the K-stage estimators under local misspecification.

Vector layouts follow the rest of the package: ``J`` and the full CCP vector are
state-major over ``(x, a)``; reduced CCP vectors drop the last action; the
joint distribution ``pi`` is ``[x_next, x, a]`` flattened. The stacked
first-step vector is ``(J, theta_f)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from .dgp import (
    alpha_star,
    assemble_joint,
    bias_direction,
    marginal_log_spec,
    theta_f_true,
)
from .estimate import bus_first_step_from_counts
from .model import ModelError, dP_dtheta, psi_map, solve_ccp_fixed_point

UPSILON_COND_MAX = 1e10
WEIGHT_COND_MAX = 1e12


class IllConditioned(ModelError):
    """A matrix to be inverted exceeds its condition-number threshold."""


@dataclass
class LimitInputs:
    pi_star: np.ndarray
    p_star: np.ndarray  # (X, A)
    m_star: np.ndarray
    j_star: np.ndarray  # (X * A,)
    alpha_star: np.ndarray
    theta_f_star: np.ndarray
    dP_dalpha: np.ndarray  # (X * (A-1), d_alpha)
    dP_dthetaf: np.ndarray  # (X * (A-1), d_theta_f)
    dG1_dPi: np.ndarray  # (d_theta_f, X * X * A)
    B: Optional[np.ndarray] = None
    delta: float = 0.5

    @property
    def n_states(self):
        return self.p_star.shape[0]

    @property
    def n_actions(self):
        return self.p_star.shape[1]


@dataclass
class AsymptoticSummary:
    upsilon: np.ndarray
    AB: np.ndarray
    AV: np.ndarray
    AMSE: np.ndarray
    regime: str


def regime(delta, tol=1e-12):
    if delta <= 0:
        raise ModelError("delta must be positive")
    if abs(delta - 0.5) <= tol:
        return "delta=1/2"
    return "delta<1/2" if delta < 0.5 else "delta>1/2"


def _sym(M):
    return 0.5 * (M + M.T)


def _checked_solve(A, b, cond_max, what):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditioned(f"{what}: condition number {cond:.3e} exceeds {cond_max:.0e}")
    return np.linalg.solve(A, b)


# ---------------------------------------------------------------------------
# Building blocks


def phi_matrix(p_star, m_star):
    """Block-diagonal information matrix of the reduced CCPs."""
    P = np.asarray(p_star, dtype=float)
    m = np.asarray(m_star, dtype=float)
    if not np.all((P > 0) & (P < 1)):
        raise ModelError("CCPs must be interior")
    if np.any(m <= 0):
        raise ModelError("marginal must be positive")
    k = P.shape[1] - 1
    blocks = [
        m[x] * (np.diag(1.0 / P[x, :k]) + np.ones((k, k)) / P[x, k])
        for x in range(P.shape[0])
    ]
    return block_diag(*blocks)


def sigma_matrix(p_star, m_star):
    """Jacobian of ``J -> reduced P`` at ``J = P * m``: blocks
    ``(I - P 1') / m(x)`` of size ``(A-1) x A``."""
    P = np.asarray(p_star, dtype=float)
    m = np.asarray(m_star, dtype=float)
    if np.any(m <= 0):
        raise ModelError("marginal must be positive")
    n_actions = P.shape[1]
    k = n_actions - 1
    blocks = [
        (np.eye(k, n_actions) - np.outer(P[x, :k], np.ones(n_actions))) / m[x]
        for x in range(P.shape[0])
    ]
    return block_diag(*blocks)


def delta_matrix(dG1_dPi, n_actions, n_states):
    """Jacobian of ``pi -> (J, theta_f_hat)``."""
    size = n_actions * n_states
    dG1 = np.asarray(dG1_dPi, dtype=float).reshape(-1, size * n_states)
    top = np.tile(np.eye(size), (1, n_states))
    return np.vstack([top, dG1])


def bus_first_step_gradient(pi, n_states, n_actions=2):
    """Analytic gradient of the stay-share estimator in the joint vector."""
    cube = np.asarray(pi, dtype=float).reshape(n_states, n_states, n_actions)
    idx = np.arange(n_states - 1)
    num_mask = np.zeros_like(cube)
    num_mask[idx, idx, 0] = 1.0
    den_mask = np.zeros_like(cube)
    den_mask[:, : n_states - 1, 0] = 1.0
    num = np.sum(cube * num_mask)
    den = np.sum(cube * den_mask)
    return ((num_mask * den - num * den_mask) / den**2).reshape(1, -1)


def numerical_gradient(fun, x, h=1e-6):
    """Central differences of a scalar or vector function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * h))
    return np.column_stack(cols)


def upsilon_md(dP_dalpha, dP_dthetaf, W, sigma):
    """``(G' W G)^{-1} G' W [Sigma, -dP/dtheta_f]`` with ``G = dP/dalpha'``."""
    G = np.asarray(dP_dalpha, dtype=float)
    W = np.asarray(W, dtype=float)
    rhs = np.hstack([sigma, -np.asarray(dP_dthetaf, dtype=float)])
    GW = G.T @ W
    return _checked_solve(GW @ G, GW @ rhs, UPSILON_COND_MAX, "G'WG")


def upsilon_ml(dP_dalpha, dP_dthetaf, phi, sigma):
    return upsilon_md(dP_dalpha, dP_dthetaf, phi, sigma)


# ---------------------------------------------------------------------------
# Limit objects


def limit_inputs(model, design, delta=None, with_bias=True):
    """Exact limiting DGP quantities for the bus model under ``design``.

    ``with_bias=False`` skips the bias direction (needed for designs whose
    misspecification path is not differentiable at zero).
    """
    alpha = alpha_star(design)
    theta_f = theta_f_true(design)
    P = solve_ccp_fixed_point(model, alpha, theta_f)
    m = marginal_log_spec(model.n_states)
    pi = assemble_joint(model.kernel(theta_f), P, m)
    jac = dP_dtheta(model, alpha, theta_f, P=P)
    d = model.d_alpha
    B = bias_direction(model, design) if with_bias else None
    return LimitInputs(
        pi_star=pi,
        p_star=P,
        m_star=m,
        j_star=(P * m[:, None]).ravel(),
        alpha_star=alpha,
        theta_f_star=theta_f,
        dP_dalpha=jac[:, :d],
        dP_dthetaf=jac[:, d:],
        dG1_dPi=bus_first_step_gradient(pi, model.n_states, model.n_actions),
        B=B,
        delta=design.delta if delta is None else delta,
    )


def _pieces(inputs):
    phi = phi_matrix(inputs.p_star, inputs.m_star)
    sigma = sigma_matrix(inputs.p_star, inputs.m_star)
    Delta = delta_matrix(inputs.dG1_dPi, inputs.n_actions, inputs.n_states)
    return phi, sigma, Delta


def multinomial_cov(pi):
    pi = np.asarray(pi, dtype=float)
    return np.diag(pi) - np.outer(pi, pi)


def asy_summary(inputs, upsilon, delta=None):
    """Asymptotic bias, variance and MSE of ``n^min(1/2, delta) (alpha_hat - alpha*)``."""
    delta = inputs.delta if delta is None else delta
    reg = regime(delta)
    Delta = delta_matrix(inputs.dG1_dPi, inputs.n_actions, inputs.n_states)
    UD = upsilon @ Delta
    d = upsilon.shape[0]
    if reg == "delta>1/2":
        AB = np.zeros(d)
    else:
        if inputs.B is None:
            raise ModelError("bias direction required when delta <= 1/2")
        AB = UD @ inputs.B
    if reg == "delta<1/2":
        AV = np.zeros((d, d))
    else:
        AV = _sym(UD @ multinomial_cov(inputs.pi_star) @ UD.T)
    return AsymptoticSummary(upsilon, AB, AV, AV + np.outer(AB, AB), reg)


def _bracket(inputs, with_bias):
    _, sigma, Delta = _pieces(inputs)
    L = np.hstack([sigma, -inputs.dP_dthetaf]) @ Delta
    omega = multinomial_cov(inputs.pi_star)
    if with_bias:
        if inputs.B is None:
            raise ModelError("bias direction required")
        omega = omega + np.outer(inputs.B, inputs.B)
    return _sym(L @ omega @ L.T)


def _inverse_weight(bracket):
    eye = np.eye(bracket.shape[0])
    return _sym(_checked_solve(bracket, eye, WEIGHT_COND_MAX, "weight bracket"))


def w_av(inputs):
    """Variance-minimising MD weight matrix."""
    return _inverse_weight(_bracket(inputs, with_bias=False))


def w_amse(inputs):
    """MSE-minimising MD weight matrix (requires the bias direction)."""
    return _inverse_weight(_bracket(inputs, with_bias=True))


def summaries_for(inputs, weights=None):
    """``{(estimator, weight label, delta): AsymptoticSummary}`` for ML and MD with the given weights.

    ``weights`` maps labels to matrices; defaults to the identity and the
    variance-optimal weight.
    """
    phi, sigma, _ = _pieces(inputs)
    if weights is None:
        weights = {"I": np.eye(phi.shape[0]), "W_AV": w_av(inputs)}
    dl = inputs.delta
    out = {("ML", "-", dl): asy_summary(inputs, upsilon_ml(inputs.dP_dalpha, inputs.dP_dthetaf, phi, sigma))}
    for label, W in weights.items():
        ups = upsilon_md(inputs.dP_dalpha, inputs.dP_dthetaf, W, sigma)
        out[("MD", label, dl)] = asy_summary(inputs, ups)
    return out


def write_summary_csv(summaries, path, coord_names=None):
    """One row per (estimator, weight, delta, coordinate)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "W", "delta", "regime", "coord", "AB", "AV", "AMSE"])
        for (est, weight, delta), s in summaries.items():
            for k in range(s.AB.size):
                name = coord_names[k] if coord_names else str(k + 1)
                w.writerow([est, weight, repr(float(delta)), s.regime, name,
                            repr(float(s.AB[k])), repr(float(s.AV[k, k])), repr(float(s.AMSE[k, k]))])


# ---------------------------------------------------------------------------
# Diagnostics


def log_ccp_jacobian(model, inputs, h=1e-6):
    """``d ln Psi_theta(P*) / d theta`` over all ``(x, a)``, by central differences."""
    theta = np.concatenate([inputs.alpha_star, inputs.theta_f_star])
    d = model.d_alpha
    steps = h * np.maximum(1.0, np.abs(theta))
    cols = []
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += steps[j]
        tm[j] -= steps[j]
        lp = np.log(psi_map(model, tp[:d], tp[d:], inputs.p_star)).ravel()
        lm = np.log(psi_map(model, tm[:d], tm[d:], inputs.p_star)).ravel()
        cols.append((lp - lm) / (2 * steps[j]))
    return np.column_stack(cols)


def score_identity_check(model, inputs):
    """Max-abs residuals of the two score/information identities linking
    log-CCP derivatives to ``Phi`` and ``Sigma``."""
    phi, sigma, _ = _pieces(inputs)
    dP = np.hstack([inputs.dP_dalpha, inputs.dP_dthetaf])
    dlog = log_ccp_jacobian(model, inputs)
    first = dlog.T - dP.T @ phi @ sigma
    second = (dlog * inputs.j_star[:, None]).T @ dlog - dP.T @ phi @ dP
    return float(np.max(np.abs(first))), float(np.max(np.abs(second)))


def bus_first_step_value(pi, n_states, n_actions=2):
    return bus_first_step_from_counts(pi, n_states, n_actions)
