"""Drifting data generating processes for the local-misspecification designs.

A joint distribution over observed triples ``(a, x, x_next)`` is stored as a
flat vector in the order ``x_next`` outermost, then ``x``, then ``a``
innermost, i.e. ``pi.reshape(n_states, n_states, n_actions)[x_next, x, a]``.
Summing over the outermost axis yields the (state-major) vector ``J(a, x)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import softmax

from .model import (
    ModelError,
    choice_values,
    solve_ccp_fixed_point,
    solve_value_function,
)

#: Sentinel sample size for the limiting DGP (misspecification parameter 0).
LIMIT = float("inf")

#: Name of the bit generator used for every random draw in the package.
PRNG_NAME = "numpy.random.Philox"


def make_rng(seed):
    """Counter-based generator for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


# ---------------------------------------------------------------------------
# Designs


@dataclass(frozen=True)
class CorrectSpec:
    theta_u_true: tuple = (1.0, 0.05)
    delta: float = 1.0
    theta_f_true: float = 0.25
    kind: str = field(default="correct", init=False)
    scale: float = field(default=0.0, init=False)


@dataclass(frozen=True)
class QuadraticUtility:
    """True utility of keeping adds ``scale * n**-delta * mileage(x)**2``."""

    theta_u_true: tuple = (1.0, 0.05)
    scale: float = -0.025
    delta: float = 0.5
    theta_f_true: float = 0.25
    kind: str = field(default="quadratic", init=False)


@dataclass(frozen=True)
class Mixture:
    """Share ``scale * n**-delta`` of the population is type B."""

    theta_A: tuple = (1.0, 0.05)
    theta_B: tuple = (0.95, -0.05)
    scale: float = 1.0
    delta: float = 0.5
    theta_f_true: float = 0.25
    kind: str = field(default="mixture", init=False)

    @property
    def theta_u_true(self):
        return self.theta_A


@dataclass(frozen=True)
class QuantalResponse:
    """Agents pick actions by a softmax of ``(v + eps) / tau`` with temperature
    ``tau = scale * n**-delta``, integrated over ``mc_draws`` shock draws."""

    theta_u_true: tuple = (1.0, 0.05)
    scale: float = 10.0
    delta: float = 1.0 / 3.0
    theta_f_true: float = 0.25
    mc_draws: int = 200_000
    mc_seed: int = 20240917
    kind: str = field(default="quantal", init=False)


DesignSpec = Union[CorrectSpec, QuadraticUtility, Mixture, QuantalResponse]

DESIGN_KINDS = {
    "correct": CorrectSpec,
    "quadratic": QuadraticUtility,
    "mixture": Mixture,
    "quantal": QuantalResponse,
}


def design_from_dict(spec):
    """Build a design from a plain mapping with a ``kind`` key."""
    spec = dict(spec)
    try:
        cls = DESIGN_KINDS[spec.pop("kind")]
    except KeyError as exc:
        raise ModelError(f"unknown or missing design kind: {exc}") from None
    for key in ("theta_u_true", "theta_A", "theta_B"):
        if key in spec:
            spec[key] = tuple(float(v) for v in spec[key])
    try:
        return cls(**spec)
    except TypeError as exc:
        raise ModelError(f"bad design fields: {exc}") from None


def design_to_dict(design):
    out = {"kind": design.kind}
    for key, value in design.__dict__.items():
        if key != "kind" and not (design.kind == "correct" and key == "scale"):
            out[key] = list(value) if isinstance(value, tuple) else value
    return out


def tau_n(design, n):
    """Misspecification parameter at sample size ``n`` (0 at the limit)."""
    if design.kind == "correct" or n == LIMIT:
        return 0.0
    if n < 1:
        raise ModelError("n must be >= 1")
    return design.scale * float(n) ** (-design.delta)


def theta_f_true(design):
    return np.array([design.theta_f_true])


def alpha_star(design):
    """Limiting structural parameter the estimators are centred on."""
    return np.asarray(design.theta_u_true, dtype=float)


# ---------------------------------------------------------------------------
# CCPs under each design


def quadratic_extra_term(model, coeff):
    miles = model.states
    extra = np.zeros((model.n_states, model.n_actions))
    extra[:, 0] = coeff * miles**2
    return extra


def _quantal_ccp(model, alpha, theta_f, tau, draws, seed):
    V = solve_value_function(model, alpha, theta_f)
    v = choice_values(model, alpha, theta_f, V)
    if tau == 0.0:
        return softmax(v, axis=1)
    v = v - v.max(axis=1, keepdims=True)
    eps = make_rng(seed).gumbel(size=(draws, model.n_actions))
    out = np.empty_like(v)
    for x in range(model.n_states):
        out[x] = softmax((v[x] + eps) / tau, axis=1).mean(axis=0)
    return out


def ccp_at_tau(model, design, tau, tol=1e-12):
    """True CCPs as a function of the misspecification parameter itself.

    ``tau`` may be negative for the quadratic and mixture designs, which is
    only meaningful for finite differences around zero.
    """
    theta_f = theta_f_true(design)
    alpha = alpha_star(design)
    if design.kind == "correct" or (tau == 0.0 and design.kind != "quantal"):
        return solve_ccp_fixed_point(model, alpha, theta_f, tol=tol)
    if design.kind == "quadratic":
        shifted = model.with_extra_term(quadratic_extra_term(model, tau))
        return solve_ccp_fixed_point(shifted, alpha, theta_f, tol=tol)
    if design.kind == "mixture":
        P_A = solve_ccp_fixed_point(model, np.asarray(design.theta_A), theta_f, tol=tol)
        P_B = solve_ccp_fixed_point(model, np.asarray(design.theta_B), theta_f, tol=tol)
        return (1.0 - tau) * P_A + tau * P_B
    if design.kind == "quantal":
        if tau < 0:
            raise ModelError("quantal-response temperature must be non-negative")
        return _quantal_ccp(model, alpha, theta_f, tau, design.mc_draws, design.mc_seed)
    raise ModelError(f"unknown design kind {design.kind!r}")


def true_ccp(model, design, n):
    """CCPs of the data generating process at sample size ``n`` (``LIMIT`` for
    the limit)."""
    tau = tau_n(design, n)
    if design.kind == "mixture" and not 0.0 <= tau <= 1.0:
        raise ModelError(f"mixture share {tau} outside [0, 1]")
    return ccp_at_tau(model, design, tau)


# ---------------------------------------------------------------------------
# Joint distribution


def marginal_log_spec(n_states):
    if n_states < 1:
        raise ModelError("n_states must be >= 1")
    w = 1.0 + np.log(np.arange(1, n_states + 1, dtype=float))
    return w / w.sum()


def assemble_joint(f, P, m):
    """``pi[x_next, x, a] = f[x, a, x_next] * P[x, a] * m[x]``, flattened."""
    f = np.asarray(f, dtype=float)
    P = np.asarray(P, dtype=float)
    m = np.asarray(m, dtype=float)
    n_states, n_actions = P.shape
    if f.shape != (n_states, n_actions, n_states) or m.shape != (n_states,):
        raise ModelError(
            f"shape mismatch: f {f.shape}, P {P.shape}, m {m.shape}"
        )
    joint = f * (P * m[:, None])[:, :, None]
    return np.ascontiguousarray(joint.transpose(2, 0, 1)).ravel()


def joint_cube(pi, n_states, n_actions):
    """View ``pi`` as ``[x_next, x, a]``."""
    return np.asarray(pi).reshape(n_states, n_states, n_actions)


def recover_marginal(pi, n_states, n_actions):
    return joint_cube(pi, n_states, n_actions).sum(axis=(0, 2))


def recover_ccp(pi, n_states, n_actions):
    J = joint_cube(pi, n_states, n_actions).sum(axis=0)
    return J / J.sum(axis=1, keepdims=True)


def recover_transition(pi, n_states, n_actions):
    """``f[x, a, x_next]``; NaN where ``(x, a)`` has no mass."""
    cube = joint_cube(pi, n_states, n_actions).transpose(1, 2, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return cube / cube.sum(axis=2, keepdims=True)


def joint_at_tau(model, design, tau):
    P = ccp_at_tau(model, design, tau)
    f = model.kernel(theta_f_true(design))
    return assemble_joint(f, P, marginal_log_spec(model.n_states))


def true_joint(model, design, n):
    P = true_ccp(model, design, n)
    f = model.kernel(theta_f_true(design))
    return assemble_joint(f, P, marginal_log_spec(model.n_states))


class NonSmoothDesignError(ModelError):
    """Finite-difference derivative failed its Richardson consistency check."""


def bias_direction(model, design, step=1e-4, rel_tol=0.01):
    """``B = scale * d pi / d tau`` at ``tau = 0`` by central differences.

    The estimate at ``step`` is compared to the one at ``2 * step``; a
    discrepancy above ``rel_tol`` of the vector norm raises
    :class:`NonSmoothDesignError`. The quantal-response design has no two-sided
    neighbourhood of zero (negative temperatures are not choice rules), so it is
    differenced one-sidedly and is expected to fail the check.
    """
    size = model.n_actions * model.n_states**2
    if design.kind == "correct":
        return np.zeros(size)

    def deriv(h):
        if design.kind == "quantal":
            base = joint_at_tau(model, design, 0.0)
            return (joint_at_tau(model, design, h) - base) / h
        return (joint_at_tau(model, design, h) - joint_at_tau(model, design, -h)) / (2 * h)

    d1 = deriv(step)
    d2 = deriv(2 * step)
    norm = max(np.linalg.norm(d1), np.linalg.norm(d2))
    if not np.isfinite(norm) or np.linalg.norm(d1 - d2) > rel_tol * max(norm, 1e-300):
        raise NonSmoothDesignError(
            f"{design.kind} design: derivative at step {step} and {2 * step} "
            f"differ by {np.linalg.norm(d1 - d2):.3e} (norm {norm:.3e})"
        )
    return design.scale * d1


def mixture_bias_direction(model, design):
    """Closed form for the mixture: the CCP derivative is ``P_B - P_A``."""
    theta_f = theta_f_true(design)
    P_A = solve_ccp_fixed_point(model, np.asarray(design.theta_A), theta_f, tol=1e-12)
    P_B = solve_ccp_fixed_point(model, np.asarray(design.theta_B), theta_f, tol=1e-12)
    f = model.kernel(theta_f)
    return design.scale * assemble_joint(f, P_B - P_A, marginal_log_spec(model.n_states))


# ---------------------------------------------------------------------------
# Sampling


@dataclass
class Dataset:
    """``n`` observed triples with 0-based codes."""

    a: np.ndarray
    x: np.ndarray
    x_next: np.ndarray
    seed: int = 0

    @property
    def n(self):
        return self.a.size

    def cell_counts(self, n_states, n_actions):
        idx = (self.x_next * n_states + self.x) * n_actions + self.a
        return np.bincount(idx, minlength=n_actions * n_states**2)


def cumulative_table(pi):
    cdf = np.cumsum(np.asarray(pi, dtype=float))
    cdf /= cdf[-1]
    return cdf


def draw_cells(cdf, n, rng):
    """Inverse-CDF categorical draws; returns flat cell indices."""
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    # guards against u landing exactly on the last boundary
    return np.minimum(idx, cdf.size - 1)


def decode_cells(cells, n_states, n_actions):
    a = cells % n_actions
    rest = cells // n_actions
    return a, rest % n_states, rest // n_states


def sample_dataset(dist, n, seed, n_states, n_actions):
    """Draw ``n`` i.i.d. triples from the joint distribution ``dist``."""
    if n < 1:
        raise ModelError("n must be >= 1")
    pi = np.asarray(dist, dtype=float)
    if pi.size != n_actions * n_states**2:
        raise ModelError("joint distribution size does not match the model")
    cells = draw_cells(cumulative_table(pi), n, make_rng(seed))
    a, x, x_next = decode_cells(cells, n_states, n_actions)
    return Dataset(a, x, x_next, int(seed))


def write_dataset_csv(data, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "x", "x_next"])
        for row in zip(data.a + 1, data.x + 1, data.x_next + 1):
            w.writerow(row)


def read_dataset_csv(path, n_states=None, n_actions=None):
    """Read a three-column CSV with 1-based codes.

    Raises:
        ValueError: malformed header, non-integer entries or codes out of range.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["a", "x", "x_next"]:
        raise ValueError(f"{path}: expected header a,x,x_next")
    body = [r for r in rows[1:] if r]
    if not body:
        raise ValueError(f"{path}: no observations")
    try:
        arr = np.array([[int(c) for c in r] for r in body], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-integer entry ({exc})") from None
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{path}: every row needs three fields")
    arr -= 1
    if arr.min() < 0:
        raise ValueError(f"{path}: codes are 1-based")
    if n_actions is not None and arr[:, 0].max() >= n_actions:
        raise ValueError(f"{path}: action code exceeds {n_actions}")
    if n_states is not None and arr[:, 1:].max() >= n_states:
        raise ValueError(f"{path}: state code exceeds {n_states}")
    return Dataset(arr[:, 0], arr[:, 1], arr[:, 2])

