"""Single-agent dynamic discrete choice model with extreme value type I shocks.

Array conventions used throughout the package:

* states and actions are 0-based integer codes;
* utility features are stored as ``(n_states, n_actions, d_alpha)``;
* a transition kernel is ``(n_states, n_actions, n_states)`` with
  ``f[x, a, x_next]`` and rows summing to one over the last axis;
* a CCP matrix is ``(n_states, n_actions)`` with ``P[x, a] = P(a|x)``;
* the reduced CCP vector drops the last action and flattens with the state as
  the outer index, i.e. ``P[:, :-1].ravel()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

EULER_GAMMA = float(np.euler_gamma)

#: Column-sum tolerance for CCP matrices.
CCP_SUM_TOL = 1e-10


class ModelError(ValueError):
    """Invalid model inputs (dimensions, parameters, CCPs)."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class UtilitySpec:
    """Linear-in-parameters flow utility ``features[x, a] @ alpha + extra_term[x, a]``.

    ``extra_term`` is only nonzero when building a data generating process;
    the researcher's model leaves it at ``None``.
    """

    features: np.ndarray
    extra_term: Optional[np.ndarray] = None
    alpha_bound: float = 10.0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 3:
            raise ModelError("features must have shape (n_states, n_actions, d_alpha)")
        object.__setattr__(self, "features", feats)
        if self.extra_term is not None:
            extra = np.asarray(self.extra_term, dtype=float)
            if extra.shape != feats.shape[:2]:
                raise ModelError("extra_term must have shape (n_states, n_actions)")
            object.__setattr__(self, "extra_term", extra)

    @property
    def d_alpha(self):
        return self.features.shape[2]

    def flow(self, alpha):
        u = self.features @ alpha
        if self.extra_term is not None:
            u = u + self.extra_term
        return u


@dataclass(frozen=True)
class TransitionSpec:
    """Parametric transition kernel ``theta_f -> f[x, a, x_next]``."""

    kernel: Callable[[np.ndarray], np.ndarray]
    d_theta_f: int
    theta_f_bounds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    name: str = "custom"

    def __call__(self, theta_f):
        return self.kernel(np.asarray(theta_f, dtype=float))


@dataclass(frozen=True)
class ModelSpec:
    n_states: int
    n_actions: int
    beta: float
    utility: UtilitySpec
    transition: TransitionSpec
    name: str = "custom"
    #: numeric value of each state (e.g. mileage); defaults to 1..n_states
    state_values: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        # beta = 0 (myopic agent) is allowed; it is the closed-form test case
        if not 0.0 <= self.beta < 1.0:
            raise ModelError(f"beta must lie in [0, 1), got {self.beta}")
        if self.n_states < 1 or self.n_actions < 2:
            raise ModelError("need n_states >= 1 and n_actions >= 2")
        if self.utility.features.shape[:2] != (self.n_states, self.n_actions):
            raise ModelError(
                f"features shape {self.utility.features.shape[:2]} does not match "
                f"({self.n_states}, {self.n_actions})"
            )

    @property
    def d_alpha(self):
        return self.utility.d_alpha

    @property
    def states(self):
        if self.state_values is None:
            return np.arange(1, self.n_states + 1, dtype=float)
        return np.asarray(self.state_values, dtype=float)

    @property
    def d_theta_f(self):
        return self.transition.d_theta_f

    @property
    def n_reduced(self):
        return self.n_states * (self.n_actions - 1)

    def with_extra_term(self, extra_term):
        return replace(self, utility=replace(self.utility, extra_term=extra_term))

    def kernel(self, theta_f):
        """Transition array at ``theta_f``, validated to be stochastic."""
        theta_f = np.atleast_1d(np.asarray(theta_f, dtype=float))
        if theta_f.shape != (self.d_theta_f,):
            raise ModelError(f"theta_f must have length {self.d_theta_f}")
        f = self.transition(theta_f)
        if f.shape != (self.n_states, self.n_actions, self.n_states):
            raise ModelError(f"kernel returned shape {f.shape}")
        if np.any(f < -1e-15) or np.max(np.abs(f.sum(axis=2) - 1.0)) > 1e-12:
            raise ModelError(f"theta_f={theta_f} gives an invalid transition kernel")
        return f


# ---------------------------------------------------------------------------
# Standard model: bus engine replacement


def bus_kernel(n_states):
    """Mileage transition: keep (action 0) stays w.p. theta_f, else moves up one
    state (capped at the top); replace (action 1) resets to the first state."""

    def kernel(theta_f):
        stay = float(theta_f[0])
        f = np.zeros((n_states, 2, n_states))
        idx = np.arange(n_states)
        f[idx, 0, idx] += stay
        f[idx, 0, np.minimum(idx + 1, n_states - 1)] += 1.0 - stay
        f[:, 1, 0] = 1.0
        return f

    return kernel


def bus_features(n_states, mileage_origin=1.0):
    """Features for ``u(x, a) = -theta_1 1[replace] - theta_2 1[keep] mileage(x)``
    with ``mileage(x) = mileage_origin + (x - 1)`` for states ``x = 1..n_states``."""
    miles = mileage_origin + np.arange(n_states, dtype=float)
    feats = np.zeros((n_states, 2, 2))
    feats[:, 0, 1] = -miles
    feats[:, 1, 0] = -1.0
    return feats


def bus_model(n_states=20, beta=0.9999, alpha_bound=10.0, mileage_origin=1.0):
    """Bus engine replacement model; action 0 keeps, action 1 replaces.

    ``mileage_origin`` is the mileage of the first state. With 1 the mileage
    equals the state label; with 0 a fresh engine has zero mileage.
    """
    return ModelSpec(
        n_states=n_states,
        n_actions=2,
        beta=beta,
        utility=UtilitySpec(bus_features(n_states, mileage_origin), alpha_bound=alpha_bound),
        transition=TransitionSpec(
            bus_kernel(n_states), 1, np.array([[0.0, 1.0]]), name="bus"
        ),
        name="bus",
        state_values=mileage_origin + np.arange(n_states, dtype=float),
    )


def tabular_model(features, transitions, beta, alpha_bound=10.0):
    """Model with a fixed (parameter-free) transition array ``f[x, a, x_next]``."""
    f = np.asarray(transitions, dtype=float)
    feats = np.asarray(features, dtype=float)
    n_states, n_actions = feats.shape[:2]
    return ModelSpec(
        n_states=n_states,
        n_actions=n_actions,
        beta=beta,
        utility=UtilitySpec(feats, alpha_bound=alpha_bound),
        transition=TransitionSpec(lambda theta_f: f, 0, name="tabular"),
        name="tabular",
    )


# ---------------------------------------------------------------------------
# CCP helpers


def check_ccp(P, n_states=None, n_actions=None):
    """Validate an interior CCP matrix and return it as a float array."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise ModelError("CCP matrix must be 2-d (n_states, n_actions)")
    if n_states is not None and P.shape != (n_states, n_actions):
        raise ModelError(f"CCP matrix shape {P.shape} != ({n_states}, {n_actions})")
    if not np.all((P > 0.0) & (P < 1.0)):
        raise ModelError("CCPs must lie strictly inside (0, 1)")
    if np.max(np.abs(P.sum(axis=1) - 1.0)) > CCP_SUM_TOL:
        raise ModelError("CCP rows must sum to one")
    return P


def reduce_ccp(P):
    """Drop the last action; state is the outer index."""
    return np.asarray(P)[:, :-1].ravel()


def expand_ccp(p_reduced, n_actions):
    """Inverse of :func:`reduce_ccp`."""
    head = np.asarray(p_reduced, dtype=float).reshape(-1, n_actions - 1)
    return np.column_stack([head, 1.0 - head.sum(axis=1)])


def uniform_ccp(model):
    return np.full((model.n_states, model.n_actions), 1.0 / model.n_actions)


def _check_alpha(model, alpha):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (model.d_alpha,):
        raise ModelError(f"alpha must have length {model.d_alpha}, got {alpha.shape}")
    return alpha


# ---------------------------------------------------------------------------
# Core maps


def choice_values(model, alpha, theta_f, V):
    """Choice-specific values ``u(x, a) + beta * sum_x' V(x') f(x'|x, a)``."""
    alpha = _check_alpha(model, alpha)
    V = np.asarray(V, dtype=float)
    if V.shape != (model.n_states,):
        raise ModelError(f"V must have length {model.n_states}")
    if not np.all(np.isfinite(V)):
        raise ModelError("V contains non-finite values")
    f = model.kernel(theta_f)
    return model.utility.flow(alpha) + model.beta * (f @ V)


def lambda_map(v):
    """Logit choice probabilities from choice-specific values (row-wise softmax)."""
    return softmax(np.asarray(v, dtype=float), axis=1)


def varphi_map(model, alpha, theta_f, P):
    """Value function implied by following the CCPs ``P`` forever.

    Solves ``(I - beta F_P) V = sum_a P(a|x) [u(x, a) + gamma - ln P(a|x)]``
    where ``F_P(x'|x) = sum_a P(a|x) f(x'|x, a)``.
    """
    alpha = _check_alpha(model, alpha)
    P = check_ccp(P, model.n_states, model.n_actions)
    f = model.kernel(theta_f)
    u = model.utility.flow(alpha)
    ubar = np.sum(P * (u + EULER_GAMMA - np.log(P)), axis=1)
    Fbar = np.einsum("xa,xay->xy", P, f)
    M = np.eye(model.n_states) - model.beta * Fbar
    try:
        return np.linalg.solve(M, ubar)
    except np.linalg.LinAlgError as exc:
        raise ModelError("singular policy valuation system") from exc


def psi_map(model, alpha, theta_f, P):
    """Policy iteration operator ``Lambda(choice_values(varphi(P)))``."""
    V = varphi_map(model, alpha, theta_f, P)
    return lambda_map(choice_values(model, alpha, theta_f, V))


@dataclass
class FixedPointResult:
    P: np.ndarray
    iterations: int
    residual: float


def solve_ccp_fixed_point(
    model, alpha, theta_f, P0=None, tol=1e-12, max_iter=10_000, full_output=False
):
    """Iterate ``P <- Psi(P)`` until the sup-norm change drops below ``tol``.

    Raises:
        ConvergenceError: ``max_iter`` reached; carries the last residual.
    """
    if tol <= 0:
        raise ModelError("tol must be positive")
    P = uniform_ccp(model) if P0 is None else check_ccp(P0, model.n_states, model.n_actions)
    resid = np.inf
    for it in range(1, max_iter + 1):
        P_new = psi_map(model, alpha, theta_f, P)
        resid = float(np.max(np.abs(P_new - P)))
        P = P_new
        if resid < tol:
            return FixedPointResult(P, it, resid) if full_output else P
    raise ConvergenceError(
        f"policy iteration did not converge in {max_iter} iterations "
        f"(last residual {resid:.3e})",
        residual=resid,
        iterations=max_iter,
    )


def solve_value_function(model, alpha, theta_f, tol=1e-10, max_iter=1_000_000):
    """Smoothed value function by value iteration on
    ``V(x) <- gamma + logsumexp_a v(x, a)``.

    The iterate is re-centred every sweep (relative value iteration) and the
    level is recovered from the MacQueen-Porteus bounds, which bracket the fixed
    point within ``beta / (1 - beta) * span(TV - V) / 2``. Iteration stops once
    that bracket is below ``tol``. Needed for discount factors close to one,
    where plain sup-norm stopping would take ~1/(1-beta) sweeps.
    """
    if tol <= 0:
        raise ModelError("tol must be positive")
    alpha = _check_alpha(model, alpha)
    f = model.kernel(theta_f)
    u = model.utility.flow(alpha)
    beta = model.beta
    scale = beta / (1.0 - beta)
    V = np.zeros(model.n_states)
    gap = np.inf
    for _ in range(max_iter):
        TV = EULER_GAMMA + logsumexp(u + beta * (f @ V), axis=1)
        d = TV - V
        lo, hi = d.min(), d.max()
        gap = scale * (hi - lo) / 2.0
        if gap < tol:
            return TV + scale * (hi + lo) / 2.0
        V = TV - TV[0]
    raise ConvergenceError(
        f"value iteration did not converge in {max_iter} sweeps (bound {gap:.3e})",
        residual=gap,
        iterations=max_iter,
    )


# ---------------------------------------------------------------------------
# Derivatives


def _reduced_psi(model, alpha, theta_f, p_reduced):
    P = expand_ccp(p_reduced, model.n_actions)
    return reduce_ccp(psi_map(model, alpha, theta_f, P))


def jacobian_psi_wrt_P(model, alpha, theta_f, P, h=1e-6):
    """Central-difference Jacobian of the reduced Psi in the reduced CCPs.

    Each coordinate ``P(a|x)`` with ``a`` below the last action is moved by
    ``+-h``; the last action's probability absorbs the change.
    """
    P = check_ccp(P, model.n_states, model.n_actions)
    p0 = reduce_ccp(P)
    n = p0.size
    jac = np.empty((n, n))
    for j in range(n):
        up, dn = p0.copy(), p0.copy()
        up[j] += h
        dn[j] -= h
        # raises ModelError if the step leaves the simplex interior
        jac[:, j] = (
            _reduced_psi(model, alpha, theta_f, up) - _reduced_psi(model, alpha, theta_f, dn)
        ) / (2.0 * h)
    return jac


def _theta_steps(theta, h):
    return h * np.maximum(1.0, np.abs(theta))


def dP_dtheta(model, alpha, theta_f, h=1e-6, P=None):
    """Derivative of the model CCPs in ``(alpha, theta_f)``.

    Uses the identity ``dP_theta/dtheta = dPsi_theta(P_theta)/dtheta``: central
    differences of Psi in theta with the CCP argument held at the fixed point.

    Returns:
        Array ``(n_reduced, d_alpha + d_theta_f)``; the first ``d_alpha``
        columns are ``dP/dalpha'``.
    """
    alpha = _check_alpha(model, alpha)
    theta_f = np.atleast_1d(np.asarray(theta_f, dtype=float))
    if P is None:
        P = solve_ccp_fixed_point(model, alpha, theta_f)
    theta = np.concatenate([alpha, theta_f])
    steps = _theta_steps(theta, h)
    da = model.d_alpha
    out = np.empty((model.n_reduced, theta.size))
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += steps[j]
        tm[j] -= steps[j]
        fp = reduce_ccp(psi_map(model, tp[:da], tp[da:], P))
        fm = reduce_ccp(psi_map(model, tm[:da], tm[da:], P))
        out[:, j] = (fp - fm) / (2.0 * steps[j])
    return out


def dP_dtheta_resolved(model, alpha, theta_f, h=1e-6, tol=1e-12):
    """Central differences of the full map ``theta -> P_theta`` (re-solving the
    fixed point at each perturbed theta). Slow; used as a check."""
    alpha = _check_alpha(model, alpha)
    theta_f = np.atleast_1d(np.asarray(theta_f, dtype=float))
    theta = np.concatenate([alpha, theta_f])
    steps = _theta_steps(theta, h)
    da = model.d_alpha
    P_star = solve_ccp_fixed_point(model, alpha, theta_f, tol=tol)
    out = np.empty((model.n_reduced, theta.size))
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += steps[j]
        tm[j] -= steps[j]
        fp = solve_ccp_fixed_point(model, tp[:da], tp[da:], P0=P_star, tol=tol)
        fm = solve_ccp_fixed_point(model, tm[:da], tm[da:], P0=P_star, tol=tol)
        out[:, j] = (reduce_ccp(fp) - reduce_ccp(fm)) / (2.0 * steps[j])
    return out
