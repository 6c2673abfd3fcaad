import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddcpi.model import (
    EULER_GAMMA,
    ConvergenceError,
    ModelError,
    ModelSpec,
    TransitionSpec,
    UtilitySpec,
    bus_features,
    bus_kernel,
    bus_model,
    check_ccp,
    choice_values,
    dP_dtheta,
    dP_dtheta_resolved,
    expand_ccp,
    jacobian_psi_wrt_P,
    lambda_map,
    psi_map,
    reduce_ccp,
    solve_ccp_fixed_point,
    solve_value_function,
    tabular_model,
    uniform_ccp,
    varphi_map,
)
from ddcpi.dgp import make_rng

from .conftest import ALPHA, THETA_F


def test_lambda_two_actions():
    P = lambda_map(np.array([[0.0, np.log(3.0)]]))
    np.testing.assert_allclose(P, [[0.25, 0.75]], rtol=0, atol=1e-15)


def test_lambda_is_shift_invariant_and_stable():
    v = np.array([[1000.0, 1001.0, 999.0]])
    np.testing.assert_allclose(lambda_map(v), lambda_map(v - 1000.0), atol=1e-15)
    assert np.all(np.isfinite(lambda_map(v)))


def test_bus_kernel_structure():
    f = bus_kernel(5)(np.array([0.3]))
    np.testing.assert_allclose(f.sum(axis=2), 1.0)
    assert f[0, 0, 0] == pytest.approx(0.3) and f[0, 0, 1] == pytest.approx(0.7)
    assert f[4, 0, 4] == 1.0  # top state absorbs
    np.testing.assert_array_equal(f[:, 1, 0], 1.0)  # replacement resets


def test_bus_features_origin():
    one = bus_features(4)
    zero = bus_features(4, mileage_origin=0.0)
    np.testing.assert_array_equal(one[:, 0, 1], -np.arange(1, 5))
    np.testing.assert_array_equal(zero[:, 0, 1], -np.arange(0, 4))
    np.testing.assert_array_equal(one[:, 1, 0], -1.0)


def test_kernel_rejects_bad_theta(bus):
    with pytest.raises(ModelError):
        bus.kernel([1.5])


def test_model_validation():
    feats = np.zeros((2, 2, 1))
    with pytest.raises(ModelError):
        tabular_model(feats, np.full((2, 2, 2), 0.5), beta=1.0)
    with pytest.raises(ModelError):
        tabular_model(feats, np.full((2, 2, 2), 0.4), beta=0.9).kernel([])


def test_ccp_helpers_roundtrip():
    P = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])
    np.testing.assert_allclose(expand_ccp(reduce_ccp(P), 3), P)
    with pytest.raises(ModelError):
        check_ccp(np.array([[0.2, 0.2]]))
    with pytest.raises(ModelError):
        check_ccp(np.array([[1.0, 0.0]]))


def test_varphi_myopic_closed_form():
    """With beta = 0 the value is expected flow plus gamma - sum P ln P."""
    rng = make_rng(1)
    feats = rng.normal(size=(3, 2, 2))
    model = tabular_model(feats, rng.dirichlet(np.ones(3), size=(3, 2)), beta=0.0)
    alpha = np.array([0.4, -0.2])
    P = rng.dirichlet(np.ones(2), size=3)
    expected = np.sum(P * (feats @ alpha + EULER_GAMMA - np.log(P)), axis=1)
    np.testing.assert_allclose(varphi_map(model, alpha, [], P), expected, atol=1e-14)


def test_bus_fixed_point_frozen(p_star):
    # frozen from a converged run at tol 1e-12
    np.testing.assert_allclose(p_star[:3, 0], [0.70648427, 0.67706605, 0.64821544], atol=1e-8)
    assert p_star[-1, 0] == pytest.approx(0.29354150770625026, abs=1e-9)


def test_bus_fixed_point_frozen_zero_origin(bus0):
    P = solve_ccp_fixed_point(bus0, ALPHA, THETA_F)
    np.testing.assert_allclose(P[[0, 9, 19], 0], [0.71619784, 0.4768736, 0.29838001], atol=1e-8)


def test_fixed_point_is_fixed(bus, p_star):
    np.testing.assert_allclose(psi_map(bus, ALPHA, THETA_F, p_star), p_star, atol=1e-12)


def test_value_iteration_matches_policy_iteration(bus, p_star):
    V = solve_value_function(bus, ALPHA, THETA_F)
    np.testing.assert_allclose(lambda_map(choice_values(bus, ALPHA, THETA_F, V)), p_star, atol=1e-8)


def test_zero_jacobian_bus(bus, p_star):
    assert np.max(np.abs(jacobian_psi_wrt_P(bus, ALPHA, THETA_F, p_star))) < 1e-5


def test_jacobian_nonzero_away_from_fixed_point(bus):
    jac = jacobian_psi_wrt_P(bus, ALPHA, THETA_F, uniform_ccp(bus))
    assert np.max(np.abs(jac)) > 1e-3


def test_convergence_error_carries_residual(bus):
    with pytest.raises(ConvergenceError) as info:
        solve_ccp_fixed_point(bus, ALPHA, THETA_F, max_iter=1)
    assert info.value.residual > 0 and info.value.iterations == 1


def test_fixed_point_derivative_matches_resolve(bus):
    fast = dP_dtheta(bus, ALPHA, THETA_F)
    full = dP_dtheta_resolved(bus, ALPHA, THETA_F)
    assert fast.shape == (bus.n_reduced, 3)
    assert np.max(np.abs(fast - full)) < 1e-4


def test_extra_term_shifts_ccp(bus, p_star):
    extra = np.zeros((bus.n_states, bus.n_actions))
    extra[:, 0] = 0.1
    P = solve_ccp_fixed_point(bus.with_extra_term(extra), ALPHA, THETA_F)
    assert np.all(P[:, 0] > p_star[:, 0])


@st.composite
def small_models(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = make_rng(seed)
    X = int(rng.integers(1, 5))
    A = int(rng.integers(2, 4))
    d = int(rng.integers(1, 3))
    beta = float(rng.uniform(0.0, 0.97))
    model = tabular_model(rng.normal(size=(X, A, d)), rng.dirichlet(np.ones(X), size=(X, A)), beta)
    return model, rng.normal(size=d), rng


@settings(max_examples=30, deadline=None)
@given(small_models())
def test_random_models_fixed_point_properties(case):
    model, alpha, rng = case
    P = solve_ccp_fixed_point(model, alpha, [])
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P > 0)
    # any start converges to the same point
    P0 = rng.dirichlet(np.ones(model.n_actions), size=model.n_states)
    np.testing.assert_allclose(solve_ccp_fixed_point(model, alpha, [], P0=P0), P, atol=1e-10)
    assert np.max(np.abs(jacobian_psi_wrt_P(model, alpha, [], P))) < 1e-5


@settings(max_examples=30, deadline=None)
@given(small_models())
def test_choice_values_affine_in_alpha(case):
    model, alpha, rng = case
    P = rng.dirichlet(np.ones(model.n_actions), size=model.n_states)
    other = rng.normal(size=alpha.size)

    def v(a):
        return choice_values(model, a, [], varphi_map(model, a, [], P))

    lhs = v(alpha + other) + v(np.zeros_like(alpha))
    np.testing.assert_allclose(lhs, v(alpha) + v(other), atol=1e-9)


def test_utility_spec_rejects_bad_shapes():
    with pytest.raises(ModelError):
        UtilitySpec(features=np.zeros((2, 2)))


def test_model_spec_rejects_one_action():
    with pytest.raises(ModelError):
        ModelSpec(
            2, 1, 0.9, UtilitySpec(np.zeros((2, 1, 1))),
            TransitionSpec(lambda t: np.full((2, 1, 2), 0.5), 0, ()),
        )


def test_bus_model_rejects_bad_beta():
    with pytest.raises(ModelError):
        bus_model(beta=1.2)


def _one_state(beta, u=(0.0, 0.0)):
    feats = np.array(u, dtype=float).reshape(1, 2, 1)
    return tabular_model(feats, np.ones((1, 2, 1)), beta)


def test_choice_values_myopic_and_zero_continuation(bus):
    rng = make_rng(2)
    model = tabular_model(rng.normal(size=(3, 2, 1)), rng.dirichlet(np.ones(3), size=(3, 2)), 0.0)
    extra = rng.normal(size=(3, 2))
    model = model.with_extra_term(extra)
    u = model.utility.features @ np.array([0.7]) + extra
    np.testing.assert_allclose(choice_values(model, [0.7], [], rng.normal(size=3)), u, atol=1e-15)
    np.testing.assert_allclose(
        choice_values(bus, ALPHA, THETA_F, np.zeros(bus.n_states)),
        bus.utility.features @ ALPHA, atol=1e-15,
    )


def test_choice_values_brute_force_sum(bus):
    V = solve_value_function(bus, ALPHA, THETA_F)
    f = bus.kernel(THETA_F)
    u = bus.utility.features @ ALPHA
    brute = np.empty_like(u)
    for x in range(bus.n_states):
        for a in range(bus.n_actions):
            brute[x, a] = u[x, a] + bus.beta * sum(V[y] * f[x, a, y] for y in range(bus.n_states))
    np.testing.assert_allclose(choice_values(bus, ALPHA, THETA_F, V), brute, rtol=1e-13)


def test_lambda_closed_forms():
    np.testing.assert_allclose(lambda_map(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(lambda_map(np.array([[np.log(3.0), 0.0]])), [[0.75, 0.25]], atol=1e-15)
    P = lambda_map(np.array([[1000.0, 0.0]]))
    assert abs(P[0, 0] - 1.0) < 1e-12 and np.all(np.isfinite(P))


def test_varphi_fair_coin():
    half = np.full((1, 2), 0.5)
    V0 = varphi_map(_one_state(0.0), [1.0], [], half)
    assert V0[0] == pytest.approx(EULER_GAMMA + np.log(2.0), abs=1e-12)
    assert V0[0] == pytest.approx(1.27036, abs=1e-5)
    V1 = varphi_map(_one_state(0.5), [1.0], [], half)
    assert V1[0] == pytest.approx(2.54072, abs=1e-5)


def test_value_iteration_closed_forms():
    assert solve_value_function(_one_state(0.5), [1.0], [])[0] == pytest.approx(2.54072, abs=1e-5)
    rng = make_rng(4)
    feats = rng.normal(size=(3, 2, 1))
    model = tabular_model(feats, rng.dirichlet(np.ones(3), size=(3, 2)), 0.0)
    u = feats[:, :, 0] * 0.3
    expected = EULER_GAMMA + np.log(np.exp(u).sum(axis=1))
    np.testing.assert_allclose(solve_value_function(model, [0.3], []), expected, atol=1e-12)


def test_varphi_at_fixed_point_matches_value_iteration(bus, p_star):
    V = solve_value_function(bus, ALPHA, THETA_F)
    np.testing.assert_allclose(varphi_map(bus, ALPHA, THETA_F, p_star), V, atol=1e-8, rtol=0)


def test_psi_composes_components(bus):
    P = uniform_ccp(bus)
    V = varphi_map(bus, ALPHA, THETA_F, P)
    step = lambda_map(choice_values(bus, ALPHA, THETA_F, V))
    np.testing.assert_allclose(psi_map(bus, ALPHA, THETA_F, P), step, atol=1e-15)


def test_fixed_point_from_asymmetric_start(bus, p_star):
    P0 = np.tile([0.99, 0.01], (bus.n_states, 1))
    np.testing.assert_allclose(solve_ccp_fixed_point(bus, ALPHA, THETA_F, P0=P0), p_star, atol=1e-11)


def test_symmetric_one_state_fixed_point():
    P = solve_ccp_fixed_point(_one_state(0.9), [1.0], [])
    np.testing.assert_allclose(P, [[0.5, 0.5]], atol=1e-15)


def test_one_state_psi_ignores_input():
    model = _one_state(0.9, u=(0.3, -0.2))
    expected = lambda_map(np.array([[0.3, -0.2]]))
    for P in ([[0.5, 0.5]], [[0.9, 0.1]], [[0.02, 0.98]]):
        np.testing.assert_allclose(psi_map(model, [1.0], [], np.array(P)), expected, atol=1e-12)


def test_one_state_jacobian_vanishes():
    model = _one_state(0.9, u=(0.3, -0.2))
    P = np.array([[0.8, 0.2]])
    assert np.max(np.abs(jacobian_psi_wrt_P(model, [1.0], [], P))) < 1e-9


def test_jacobian_away_from_fixed_point_is_step_consistent(bus):
    P = uniform_ccp(bus)
    j1 = jacobian_psi_wrt_P(bus, ALPHA, THETA_F, P, h=1e-5)
    j2 = jacobian_psi_wrt_P(bus, ALPHA, THETA_F, P, h=1e-6)
    assert np.max(np.abs(j1)) > 1e-3
    # roundoff in values of order 1 / (1 - beta) limits agreement to ~1e-6
    np.testing.assert_allclose(j1, j2, atol=1e-5)


def test_dP_dtheta_zero_for_absent_feature():
    rng = make_rng(5)
    feats = rng.normal(size=(3, 2, 2))
    feats[:, :, 1] = 0.0
    model = tabular_model(feats, rng.dirichlet(np.ones(3), size=(3, 2)), 0.9)
    jac = dP_dtheta(model, [0.5, 0.2], [])
    np.testing.assert_array_equal(jac[:, 1], 0.0)
    assert np.max(np.abs(jac[:, 0])) > 1e-3
