"""Sample analogues, first-step estimators and K-stage policy-iteration
estimators (pseudo maximum likelihood and minimum distance).

Every stage exploits linearity of the flow utility in ``alpha``: for fixed
``(theta_f, P)`` the choice-specific value ``Psi`` feeds into the softmax is
``z0(x, a) + Z(x, a) @ alpha``. One linear solve per stage builds ``(z0, Z)``;
the stage optimisation then only touches a softmax of an affine index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .dgp import joint_cube
from .model import EULER_GAMMA, ModelError, check_ccp, reduce_ccp

#: Sample CCPs are clamped into [CCP_FLOOR, 1 - CCP_FLOOR].
CCP_FLOOR = 1e-10
GRAD_TOL = 1e-9
MAX_NEWTON_ITER = 500


class InvalidReplication(ValueError):
    """A first-step estimator is undefined on this sample."""


# ---------------------------------------------------------------------------
# Sample analogues


@dataclass
class SampleAnalogues:
    n: int
    pi_hat: np.ndarray  # flat, [x_next, x, a]
    j_hat: np.ndarray  # (n_states, n_actions)
    m_hat: np.ndarray
    p_hat: np.ndarray  # interior CCP matrix
    f_hat: np.ndarray  # (n_states, n_actions, n_states)
    empty_states: np.ndarray  # no observation at x: P row filled uniformly
    empty_cells: np.ndarray  # no observation at (x, a): f row filled uniformly
    clamped: np.ndarray  # (x, a) CCP moved off 0 or 1

    @property
    def flagged(self):
        return bool(self.empty_states.any() or self.empty_cells.any())


def clamp_ccp(P, floor=CCP_FLOOR):
    P = np.clip(P, floor, 1.0 - floor)
    return P / P.sum(axis=1, keepdims=True)


def analogues_from_counts(counts, n_states, n_actions):
    """Frequency estimators from cell counts laid out as ``[x_next, x, a]``."""
    counts = np.asarray(counts)
    n = int(counts.sum())
    if n < 1:
        raise ModelError("need at least one observation")
    cube = joint_cube(counts, n_states, n_actions).astype(float)
    pi_hat = cube.ravel() / n
    J_counts = cube.sum(axis=0)
    m_counts = J_counts.sum(axis=1)
    empty_states = m_counts == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        P = J_counts / m_counts[:, None]
    P[empty_states] = 1.0 / n_actions
    raw_boundary = (P <= 0.0) | (P >= 1.0)
    P = clamp_ccp(P)
    trans = cube.transpose(1, 2, 0)
    empty_cells = J_counts == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        f_hat = trans / J_counts[:, :, None]
    f_hat[empty_cells] = 1.0 / n_states
    return SampleAnalogues(
        n=n,
        pi_hat=pi_hat,
        j_hat=J_counts / n,
        m_hat=m_counts / n,
        p_hat=P,
        f_hat=f_hat,
        empty_states=empty_states,
        empty_cells=empty_cells,
        clamped=raw_boundary & ~empty_states[:, None],
    )


def sample_analogues(data, n_actions, n_states):
    return analogues_from_counts(data.cell_counts(n_states, n_actions), n_states, n_actions)


def bus_first_step_from_counts(counts, n_states, n_actions=2):
    """Share of keep decisions below the top state with no mileage increase."""
    cube = joint_cube(counts, n_states, n_actions)
    idx = np.arange(n_states - 1)
    stay = cube[idx, idx, 0].sum()
    total = cube[:, : n_states - 1, 0].sum()
    if total == 0:
        raise InvalidReplication("no keep decision below the top state")
    return float(stay) / float(total)


def first_step_theta_f_bus(data, n_states=None):
    """``theta_f`` estimate from raw triples (0-based codes)."""
    if n_states is None:
        n_states = int(max(data.x.max(), data.x_next.max())) + 1
    below_top = (data.a == 0) & (data.x != n_states - 1)
    total = int(below_top.sum())
    if total == 0:
        raise InvalidReplication("no keep decision below the top state")
    return float(np.sum(below_top & (data.x_next == data.x))) / total


# ---------------------------------------------------------------------------
# Linear index


@dataclass
class LinearIndex:
    """Choice-value index relative to the last action:
    ``v(alpha) = offset + slope @ alpha`` with shapes ``(X, A)`` and ``(X, A, d)``."""

    offset: np.ndarray
    slope: np.ndarray

    def values(self, alpha):
        return self.offset + self.slope @ alpha

    def ccp(self, alpha):
        return softmax(self.values(alpha), axis=1)


def linear_index(model, theta_f, P, f=None):
    """Affine map ``alpha -> choice values`` behind ``Psi_(alpha, theta_f)(P)``."""
    if f is None:
        f = model.kernel(theta_f)
    feats = model.utility.features
    extra = model.utility.extra_term
    n_states = model.n_states
    beta = model.beta
    fbar = np.einsum("xa,xay->xy", P, f)
    rhs = np.empty((n_states, 1 + model.d_alpha))
    rhs[:, 0] = np.sum(P * (EULER_GAMMA - np.log(P)), axis=1)
    if extra is not None:
        rhs[:, 0] += np.sum(P * extra, axis=1)
    rhs[:, 1:] = np.einsum("xa,xad->xd", P, feats)
    sol = np.linalg.solve(np.eye(n_states) - beta * fbar, rhs)
    cont = beta * (f @ sol)  # (X, A, 1 + d)
    offset = cont[:, :, 0]
    if extra is not None:
        offset = offset + extra
    slope = feats + cont[:, :, 1:]
    # only within-state differences matter; removing the last action's value
    # keeps the O(1 / (1 - beta)) level out of the softmax arithmetic
    offset = offset - offset[:, -1:]
    slope = slope - slope[:, -1:, :]
    return LinearIndex(offset, slope)


# ---------------------------------------------------------------------------
# Criteria


def _softmax_parts(index, alpha):
    v = index.values(alpha)
    logp = log_softmax(v, axis=1)
    p = np.exp(logp)
    zbar = np.einsum("xa,xad->xd", p, index.slope)
    dev = index.slope - zbar[:, None, :]
    return logp, p, dev


def pseudo_loglik(model, alpha, theta_f, P, counts):
    """``sum_{x,a} counts(x, a) * ln Psi(P)(a|x)``; ``counts`` is ``(X, A)``."""
    P = check_ccp(P, model.n_states, model.n_actions)
    counts = np.asarray(counts, dtype=float).reshape(model.n_states, model.n_actions)
    logp = log_softmax(linear_index(model, theta_f, P).values(np.asarray(alpha, float)), axis=1)
    return float(np.sum(counts * logp))


def check_weight(W, size):
    """``None`` means identity; otherwise W must be symmetric positive definite."""
    if W is None:
        return None
    W = np.asarray(W, dtype=float)
    if W.shape != (size, size):
        raise ModelError(f"weight matrix must be {size}x{size}, got {W.shape}")
    if np.max(np.abs(W - W.T)) > 1e-10:
        raise ModelError("weight matrix is not symmetric")
    if np.linalg.eigvalsh(W)[0] <= 0:
        raise ModelError("weight matrix is not positive definite")
    return W


def md_criterion(model, alpha, theta_f, P, p_hat_reduced, W=None):
    """``-(p_hat - Psi(P))' W (p_hat - Psi(P))`` on reduced CCP vectors."""
    P = check_ccp(P, model.n_states, model.n_actions)
    p_hat_reduced = np.asarray(p_hat_reduced, dtype=float)
    if p_hat_reduced.shape != (model.n_reduced,):
        raise ModelError(f"reduced CCP vector must have length {model.n_reduced}")
    W = check_weight(W, model.n_reduced)
    e = p_hat_reduced - reduce_ccp(linear_index(model, theta_f, P).ccp(np.asarray(alpha, float)))
    return -float(e @ e) if W is None else -float(e @ W @ e)


def _ml_objective(index, weights, mass):
    """Negated pseudo-likelihood with gradient and Hessian."""

    def fgh(alpha, derivs=True):
        logp, p, dev = _softmax_parts(index, alpha)
        f = -float(np.sum(weights * logp))
        if not derivs:
            return f, None, None
        g = -np.einsum("xa,xad->d", weights, dev)
        wdev = (mass[:, None] * p)[:, :, None] * dev
        H = np.tensordot(wdev, dev, axes=([0, 1], [0, 1]))
        return f, g, H

    return fgh


def _md_objective(index, p_hat_red, W):
    """``e' W e`` with exact gradient and Hessian of the softmax."""
    n_actions = index.offset.shape[1]
    d = index.slope.shape[2]

    def fgh(alpha, derivs=True):
        _, p, dev = _softmax_parts(index, alpha)
        e = p_hat_red - p[:, :-1].ravel()
        We = e if W is None else W @ e
        f = float(e @ We)
        if not derivs:
            return f, None, None
        pd = p[:, :, None] * dev  # dp/dalpha, (X, A, d)
        G = pd[:, :-1, :].reshape(-1, d)
        WG = G if W is None else W @ G
        g = -2.0 * (G.T @ We)
        cov = np.einsum("xad,xae->xde", pd, dev)
        curv = np.einsum("xad,xae->xade", pd, dev) - p[:, :, None, None] * cov[:, None]
        weights = We.reshape(-1, n_actions - 1)
        H = 2.0 * (G.T @ WG) - 2.0 * np.einsum("xa,xade->de", weights, curv[:, :-1])
        return f, g, H

    return fgh


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class StageResult:
    alpha: np.ndarray
    objective: float
    iterations: int
    converged: bool
    at_bound: bool
    grad_norm: float


def _projected_grad(x, g, lo, hi):
    active = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
    return np.where(active, 0.0, g), active


def newton_box(fgh, x0, bound, gtol=GRAD_TOL, max_iter=MAX_NEWTON_ITER):
    """Minimise a smooth function over ``[-bound, bound]^d`` by projected
    Newton with Levenberg shifts and Armijo backtracking."""
    lo, hi = -bound, bound
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f, g, H = fgh(x)
    pg, active = _projected_grad(x, g, lo, hi)
    it = 0
    while np.max(np.abs(pg)) >= gtol and it < max_iter:
        it += 1
        free = ~active
        Hf = H[np.ix_(free, free)]
        eig_min = np.linalg.eigvalsh(Hf)[0]
        shift = 0.0 if eig_min > 1e-12 * max(1.0, abs(Hf).max()) else 1e-8 - eig_min + 1e-6 * abs(Hf).max()
        step = np.zeros_like(x)
        step[free] = -np.linalg.solve(Hf + shift * np.eye(Hf.shape[0]), g[free])
        t = 1.0
        while True:
            x_new = np.clip(x + t * step, lo, hi)
            f_new, _, _ = fgh(x_new, derivs=False)
            # slack of a few ulps so a converged Newton step is not rejected on roundoff
            if f_new <= f + 1e-4 * (g @ (x_new - x)) + 8 * np.finfo(float).eps * abs(f):
                break
            t *= 0.5
            if t < 1e-12:
                x_new = None
                break
        if x_new is None:
            break  # no descent possible at working precision
        x = x_new
        f, g, H = fgh(x)
        pg, active = _projected_grad(x, g, lo, hi)
    gnorm = float(np.max(np.abs(pg)))
    at_bound = bool(np.any((x <= lo) | (x >= hi)))
    return StageResult(x, f, it, gnorm < gtol, at_bound, gnorm)


def maximize_stage(model, index, criterion, alpha0=None):
    """One stage of the algorithm: maximise the criterion over the box.

    ``criterion`` is ``("ml", counts)`` with counts shaped ``(X, A)``, or
    ``("md", p_hat_reduced, W)`` with ``W=None`` for the identity. MD stages
    start from ``alpha0`` if given, else from the ML fit on the same index.
    """
    bound = model.utility.alpha_bound
    d = model.d_alpha
    kind = criterion[0]
    if kind == "ml":
        weights = np.asarray(criterion[1], dtype=float)
        start = np.zeros(d) if alpha0 is None else alpha0
        return newton_box(_ml_objective(index, weights, weights.sum(axis=1)), start, bound)
    if kind == "md":
        _, p_hat_red, W = criterion
        if alpha0 is None:
            raise ModelError("MD stages need a starting value")
        return newton_box(_md_objective(index, p_hat_red, W), alpha0, bound)
    raise ModelError(f"unknown criterion {kind!r}")


# ---------------------------------------------------------------------------
# K-stage estimator


@dataclass
class EstimateTrace:
    kind: str
    alpha_stages: np.ndarray  # (K, d_alpha)
    theta_f_hat: np.ndarray
    converged: np.ndarray
    at_bound: np.ndarray
    criterion_values: np.ndarray
    iterations: np.ndarray
    p_stages: Optional[list] = field(default=None, repr=False)

    @property
    def K(self):
        return self.alpha_stages.shape[0]

    @property
    def ok(self):
        return bool(self.converged.all())

    def to_record(self):
        rec = {
            "kind": self.kind,
            "K": self.K,
            "theta_f_hat": self.theta_f_hat.tolist(),
            "alpha_stages": self.alpha_stages.tolist(),
            "converged": self.converged.tolist(),
            "at_bound": self.at_bound.tolist(),
            "criterion_values": self.criterion_values.tolist(),
            "iterations": self.iterations.tolist(),
        }
        if self.p_stages is not None:
            rec["p_stages"] = [p.tolist() for p in self.p_stages]
        return rec

    def to_json(self):
        return json.dumps(self.to_record())


def k_stage_estimate(
    model, analogues, K, kind="ml", W=None, theta_f=None, p0=None, keep_ccps=False,
    alpha_start=None,
):
    """Alternate stage maximisation and CCP updates ``K`` times.

    Args:
        analogues: :class:`SampleAnalogues` of the data.
        kind: ``"ml"`` or ``"md"``; MD compares against the sample CCPs in
            every stage while the argument of Psi is updated.
        W: MD weight on reduced CCP vectors, ``None`` for the identity.
        theta_f: first-step transition estimate (required when the model's
            transition is parametric).
        p0: starting CCPs, defaults to the sample CCPs.
        alpha_start: starting value for the first stage's optimiser.
    """
    if K < 1:
        raise ModelError("K must be >= 1")
    if kind not in ("ml", "md"):
        raise ModelError(f"unknown estimator kind {kind!r}")
    theta_f = np.atleast_1d(np.asarray([] if theta_f is None else theta_f, dtype=float))
    f = model.kernel(theta_f)
    P = analogues.p_hat if p0 is None else check_ccp(p0, model.n_states, model.n_actions)
    if kind == "md":
        criterion = ("md", reduce_ccp(analogues.p_hat), check_weight(W, model.n_reduced))
    else:
        criterion = ("ml", analogues.j_hat)
    d = model.d_alpha
    alphas = np.empty((K, d))
    converged = np.zeros(K, bool)
    at_bound = np.zeros(K, bool)
    values = np.empty(K)
    iters = np.zeros(K, int)
    ccps = [P] if keep_ccps else None
    start = alpha_start
    for k in range(K):
        index = linear_index(model, theta_f, P, f)
        if kind == "md" and start is None:
            start = maximize_stage(model, index, ("ml", analogues.j_hat)).alpha
        res = maximize_stage(model, index, criterion, start)
        alphas[k] = res.alpha
        converged[k] = res.converged
        at_bound[k] = res.at_bound
        values[k] = -res.objective
        iters[k] = res.iterations
        start = res.alpha
        if k + 1 < K:
            P = clamp_ccp(index.ccp(res.alpha))
            if keep_ccps:
                ccps.append(P)
    return EstimateTrace(kind, alphas, theta_f, converged, at_bound, values, iters, ccps)


def estimate_from_data(model, data, K, kind="ml", W=None, theta_f=None, keep_ccps=True):
    """Convenience wrapper: analogues, bus first step (if needed), K stages."""
    analogues = sample_analogues(data, model.n_actions, model.n_states)
    if theta_f is None and model.d_theta_f > 0:
        theta_f = first_step_theta_f_bus(data, model.n_states)
    return k_stage_estimate(model, analogues, K, kind, W, theta_f, keep_ccps=keep_ccps)

