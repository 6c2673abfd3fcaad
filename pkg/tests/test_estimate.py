import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddcpi.dgp import CorrectSpec, Dataset, make_rng, marginal_log_spec, sample_dataset, true_joint
from ddcpi.estimate import (
    InvalidReplication,
    _md_objective,
    _ml_objective,
    analogues_from_counts,
    bus_first_step_from_counts,
    check_weight,
    estimate_from_data,
    first_step_theta_f_bus,
    k_stage_estimate,
    linear_index,
    maximize_stage,
    md_criterion,
    newton_box,
    pseudo_loglik,
    sample_analogues,
)
from ddcpi.model import ModelError, psi_map, reduce_ccp, tabular_model, uniform_ccp
from ddcpi.asymptotics import phi_matrix

from .conftest import ALPHA, THETA_F


@pytest.fixture(scope="module")
def pi_star(bus):
    return true_joint(bus, CorrectSpec(), 1000)


@pytest.fixture(scope="module")
def data_1000(pi_star):
    return sample_dataset(pi_star, 1000, 123, 20, 2)


def _population_analogues(pi, scale=1e9):
    return analogues_from_counts(pi * scale, 20, 2)


# ---------------------------------------------------------------------------
# Sample analogues


def test_single_observation():
    d = Dataset(np.array([0]), np.array([0]), np.array([1]))
    an = sample_analogues(d, 2, 3)
    assert an.pi_hat[(1 * 3 + 0) * 2 + 0] == 1.0 and an.pi_hat.sum() == 1.0
    assert 0.999 < an.p_hat[0, 0] < 1.0  # clamped to the interior
    assert an.clamped[0].any()
    np.testing.assert_array_equal(an.empty_states, [False, True, True])
    np.testing.assert_allclose(an.p_hat[1:], 0.5)
    assert an.flagged


def test_exhaustive_enumeration_is_uniform():
    X, A = 3, 2
    cells = np.repeat(np.arange(A * X * X), 4)
    a, rest = cells % A, cells // A
    d = Dataset(a, rest % X, rest // X)
    an = sample_analogues(d, A, X)
    np.testing.assert_allclose(an.pi_hat, 1 / (A * X * X))
    np.testing.assert_allclose(an.p_hat, 1 / A)
    np.testing.assert_allclose(an.f_hat, 1 / X)
    assert not an.flagged


def test_frequency_ccp_concentrates(bus, pi_star, p_star):
    an = sample_analogues(sample_dataset(pi_star, 10**5, 9, 20, 2), 2, 20)
    # the lightest state holds ~2.8% of the mass, so its binomial SE is ~0.009
    se = np.sqrt(p_star[:, 0] * p_star[:, 1] / (an.m_hat * an.n))
    assert np.max(np.abs(an.p_hat[:, 0] - p_star[:, 0]) / se) < 4.0
    assert np.max(np.abs(an.p_hat - p_star)) < 0.03


def test_first_step_closed_forms():
    stay = Dataset(np.zeros(5, int), np.array([0, 1, 2, 3, 0]), np.array([0, 1, 2, 3, 0]))
    assert first_step_theta_f_bus(stay, 5) == 1.0
    alt = Dataset(np.zeros(4, int), np.array([0, 1, 2, 3]), np.array([0, 2, 2, 4]))
    assert first_step_theta_f_bus(alt, 5) == 0.5
    with pytest.raises(InvalidReplication):
        first_step_theta_f_bus(Dataset(np.ones(3, int), np.zeros(3, int), np.zeros(3, int)), 5)


def test_first_step_consistency(pi_star):
    d = sample_dataset(pi_star, 10**5, 10, 20, 2)
    est = first_step_theta_f_bus(d, 20)
    assert abs(est - 0.25) < 0.01
    assert est == bus_first_step_from_counts(d.cell_counts(20, 2), 20)


# ---------------------------------------------------------------------------
# Criteria


def test_linear_index_reproduces_psi(bus):
    rng = make_rng(3)
    P = rng.dirichlet(np.ones(2), size=20)
    index = linear_index(bus, THETA_F, P)
    for alpha in (ALPHA, np.array([-2.0, 0.3])):
        np.testing.assert_allclose(index.ccp(alpha), psi_map(bus, alpha, THETA_F, P), atol=1e-10)


def test_pseudo_loglik_closed_forms(bus, p_star):
    counts = np.zeros((20, 2))
    counts[4, 1] = 1.0
    P = uniform_ccp(bus)
    expected = np.log(psi_map(bus, ALPHA, THETA_F, P)[4, 1])
    # values of order 1 / (1 - beta) cost a few digits
    assert pseudo_loglik(bus, ALPHA, THETA_F, P, counts) == pytest.approx(expected, abs=1e-10)
    toy = tabular_model(np.zeros((1, 2, 1)), np.ones((1, 2, 1)), 0.5)
    assert pseudo_loglik(toy, [0.3], [], np.full((1, 2), 0.5), [[0.4, 0.6]]) == pytest.approx(-np.log(2))


def test_pseudo_loglik_two_accumulation_orders(bus, data_1000):
    an = sample_analogues(data_1000, 2, 20)
    P = an.p_hat
    logpsi = np.log(psi_map(bus, ALPHA, THETA_F, P))
    per_obs = np.mean(logpsi[data_1000.x, data_1000.a])
    assert pseudo_loglik(bus, ALPHA, THETA_F, P, an.j_hat) == pytest.approx(per_obs, abs=1e-12)


def test_md_criterion_closed_forms(bus, p_star):
    target = reduce_ccp(psi_map(bus, ALPHA, THETA_F, p_star))
    assert md_criterion(bus, ALPHA, THETA_F, p_star, target) == pytest.approx(0.0, abs=1e-20)
    e = make_rng(1).normal(scale=0.01, size=20)
    assert md_criterion(bus, ALPHA, THETA_F, p_star, target + e) == pytest.approx(-(e @ e), rel=1e-12)
    with pytest.raises(ModelError):
        md_criterion(bus, ALPHA, THETA_F, p_star, target[:5])


def test_md_with_phi_is_twice_ml_score(bus, p_star):
    """With W = Phi and the population marginal, the MD gradient is twice the
    pseudo-likelihood score."""
    m = marginal_log_spec(20)
    rng = make_rng(8)
    P_hat = np.clip(p_star + rng.normal(scale=0.02, size=(20, 1)) * [1, -1], 0.01, 0.99)
    J = P_hat * m[:, None]
    phi = phi_matrix(p_star, m)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        g_ml = (pseudo_loglik(bus, ALPHA + e, THETA_F, p_star, J)
                - pseudo_loglik(bus, ALPHA - e, THETA_F, p_star, J)) / (2 * h)
        g_md = (md_criterion(bus, ALPHA + e, THETA_F, p_star, reduce_ccp(P_hat), phi)
                - md_criterion(bus, ALPHA - e, THETA_F, p_star, reduce_ccp(P_hat), phi)) / (2 * h)
        assert g_md == pytest.approx(2 * g_ml, rel=1e-5)


def test_check_weight():
    assert check_weight(None, 3) is None
    with pytest.raises(ModelError):
        check_weight(np.eye(2), 3)
    with pytest.raises(ModelError):
        check_weight(np.array([[1.0, 0.5], [0.0, 1.0]]), 2)
    with pytest.raises(ModelError):
        check_weight(-np.eye(2), 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["ml", "md-eye", "md-W"]))
def test_objective_derivatives(seed, which):
    rng = make_rng(seed)
    X, A, d = 3, 3, 2
    model = tabular_model(rng.normal(size=(X, A, d)), rng.dirichlet(np.ones(X), size=(X, A)), 0.9)
    P = rng.dirichlet(np.ones(A), size=X)
    index = linear_index(model, [], P)
    if which == "ml":
        w = rng.dirichlet(np.ones(X * A)).reshape(X, A)
        fgh = _ml_objective(index, w, w.sum(axis=1))
    else:
        M = rng.normal(size=(X * (A - 1),) * 2)
        W = None if which == "md-eye" else M @ M.T + np.eye(M.shape[0])
        fgh = _md_objective(index, rng.dirichlet(np.ones(A), size=X)[:, :-1].ravel(), W)
    alpha = rng.normal(size=d)
    f, g, H = fgh(alpha)
    h = 1e-6
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fp, gp, _ = fgh(alpha + e)
        fm, gm, _ = fgh(alpha - e)
        assert (fp - fm) / (2 * h) == pytest.approx(g[j], rel=1e-5, abs=1e-8)
        np.testing.assert_allclose((gp - gm) / (2 * h), H[:, j], rtol=1e-5, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_ml_stage_is_convex(seed):
    rng = make_rng(seed)
    model = tabular_model(rng.normal(size=(4, 3, 2)), rng.dirichlet(np.ones(4), size=(4, 3)), 0.95)
    index = linear_index(model, [], rng.dirichlet(np.ones(3), size=4))
    w = rng.dirichlet(np.ones(12)).reshape(4, 3)
    _, _, H = _ml_objective(index, w, w.sum(axis=1))(rng.normal(scale=3, size=2))
    assert np.linalg.eigvalsh(H)[0] >= -1e-12


# ---------------------------------------------------------------------------
# Optimiser and stages


def test_newton_box_hits_bound():
    def fgh(x, derivs=True):
        c = np.array([20.0, -0.5])
        f = float(np.sum((x - c) ** 2))
        return (f, 2 * (x - c), 2 * np.eye(2)) if derivs else (f, None, None)

    res = newton_box(fgh, np.zeros(2), bound=10.0)
    np.testing.assert_allclose(res.alpha, [10.0, -0.5])
    assert res.converged and res.at_bound


def test_population_ml_recovers_truth(bus, pi_star, p_star):
    an = _population_analogues(pi_star)
    res = maximize_stage(bus, linear_index(bus, THETA_F, p_star), ("ml", an.j_hat))
    np.testing.assert_allclose(res.alpha, ALPHA, atol=1e-6)
    assert res.converged and not res.at_bound


def test_population_md_recovers_truth(bus, pi_star, p_star):
    an = _population_analogues(pi_star)
    res = maximize_stage(
        bus, linear_index(bus, THETA_F, p_star), ("md", reduce_ccp(an.p_hat), None), np.zeros(2)
    )
    np.testing.assert_allclose(res.alpha, ALPHA, atol=1e-6)


def test_md_stage_needs_start(bus, p_star):
    with pytest.raises(ModelError):
        maximize_stage(bus, linear_index(bus, THETA_F, p_star), ("md", reduce_ccp(p_star), None))


def test_grid_search_oracle(bus, pi_star):
    d = sample_dataset(pi_star, 300, 5, 20, 2)
    an = sample_analogues(d, 2, 20)
    theta_f = first_step_theta_f_bus(d, 20)
    index = linear_index(bus, theta_f, an.p_hat)
    res = maximize_stage(bus, index, ("ml", an.j_hat))
    grid = np.linspace(-10, 10, 41)
    best, arg = -np.inf, None
    for a1 in grid:
        for a2 in grid:
            v = pseudo_loglik(bus, [a1, a2], [theta_f], an.p_hat, an.j_hat)
            if v > best:
                best, arg = v, np.array([a1, a2])
    assert np.all(np.abs(arg - res.alpha) <= grid[1] - grid[0])
    assert -res.objective >= best - 1e-12


def test_md_warm_start_independence(bus, data_1000):
    an = sample_analogues(data_1000, 2, 20)
    theta_f = first_step_theta_f_bus(data_1000, 20)
    index = linear_index(bus, theta_f, an.p_hat)
    crit = ("md", reduce_ccp(an.p_hat), None)
    a = maximize_stage(bus, index, crit, np.array([0.5, 0.0]))
    b = maximize_stage(bus, index, crit, np.array([2.0, 0.2]))
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-7)


def test_md_saturated_toy_interpolates():
    model = tabular_model(np.array([[[1.0], [0.0]]]), np.ones((1, 2, 1)), 0.9)
    an = analogues_from_counts(np.array([30, 70]), 1, 2)
    tr = k_stage_estimate(model, an, 2, "md")
    assert tr.criterion_values[-1] == pytest.approx(0.0, abs=1e-15)
    assert tr.alpha_stages[-1, 0] == pytest.approx(np.log(0.3 / 0.7), abs=1e-8)


# ---------------------------------------------------------------------------
# K stages


def test_exact_ccps_give_constant_stages(bus, pi_star):
    an = _population_analogues(pi_star)
    for kind in ("ml", "md"):
        tr = k_stage_estimate(bus, an, 4, kind, theta_f=THETA_F)
        np.testing.assert_allclose(tr.alpha_stages, np.tile(ALPHA, (4, 1)), atol=1e-6)


def test_k_invariance_on_one_dataset(bus, data_1000):
    for kind in ("ml", "md"):
        tr = estimate_from_data(bus, data_1000, 10, kind)
        # stages settle geometrically; by K=7 they have stabilised
        assert np.max(np.abs(tr.alpha_stages[9] - tr.alpha_stages[6])) < 1e-6
        assert np.max(np.abs(tr.alpha_stages[9] - tr.alpha_stages[2])) < 1e-3
        assert tr.ok


def test_prefix_property(bus, data_1000):
    t3 = estimate_from_data(bus, data_1000, 3, "ml")
    t1 = estimate_from_data(bus, data_1000, 1, "ml")
    np.testing.assert_array_equal(t1.alpha_stages[0], t3.alpha_stages[0])


def test_one_stage_md_is_hotz_miller(bus, data_1000):
    """K=1 MD: minimise the distance between the sample CCPs and one policy
    step taken from them."""
    an = sample_analogues(data_1000, 2, 20)
    theta_f = first_step_theta_f_bus(data_1000, 20)
    tr = k_stage_estimate(bus, an, 1, "md", theta_f=theta_f)
    alpha = tr.alpha_stages[0]
    target = reduce_ccp(an.p_hat)
    best = md_criterion(bus, alpha, [theta_f], an.p_hat, target)
    for step in (np.array([1e-3, 0]), np.array([0, 1e-5])):
        for sign in (1, -1):
            assert md_criterion(bus, alpha + sign * step, [theta_f], an.p_hat, target) <= best


def test_consistency_at_large_n(bus, pi_star):
    # the replacement cost has asymptotic SD ~ 6.8 / sqrt(n); 1e7 draws keep it near 0.002
    d = sample_dataset(pi_star, 10**7, 21, 20, 2)
    for kind in ("ml", "md"):
        tr = estimate_from_data(bus, d, 1, kind, keep_ccps=False)
        assert np.all(np.abs(tr.alpha_stages[0] - ALPHA) < 0.01)


def test_trace_serialises(bus, data_1000):
    tr = estimate_from_data(bus, data_1000, 2, "ml")
    rec = json.loads(tr.to_json())
    assert rec["K"] == 2 and len(rec["alpha_stages"]) == 2 and len(rec["p_stages"]) == 2


def test_k_must_be_positive(bus, data_1000):
    with pytest.raises(ModelError):
        estimate_from_data(bus, data_1000, 0)
