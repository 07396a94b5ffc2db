import numpy as np
import pytest

from shadowmarl.estimation import estimate_local_occupancy, occupancy_error_bound
from shadowmarl.graph import build_graph, named_graph
from shadowmarl.mdp import FactoredMDP, make_spatial_mdp, sample_batch, uniform_xi
from shadowmarl.oracle import (
    BELLMAN_TOL,
    ExactEvaluator,
    InfluenceMatrix,
    OracleError,
    OracleLimits,
    advantage_policy_gradient,
    certify_decay,
    exact_occupancy,
    exact_policy_gradient,
    exact_q,
    exact_truncated_gradient,
    finite_difference_gradient,
    influence_matrix,
    measure_decay,
    search_certificate,
    truncation_errors,
    zero_expectation_residual,
)
from shadowmarl.policy import LocalizedPolicy
from shadowmarl.utility import EntropyUtility, LinearUtility

from helpers import brute_force_occupancy, decoupled_mdp, random_instance, random_utilities, single_agent_mdp


def _rel(a, b):
    num = np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a, b)))
    return num / np.sqrt(sum(np.sum(y ** 2) for y in b))


@pytest.mark.parametrize("seed", range(4))
def test_occupancy_mass_and_forward_iteration(seed):
    mdp, pol, _ = random_instance(seed)
    occ = exact_occupancy(mdp, pol)
    assert occ.mass == pytest.approx(1 / (1 - mdp.gamma), abs=1e-10)
    np.testing.assert_allclose(occ.joint, brute_force_occupancy(mdp, pol, 1500), atol=1e-9)
    for i, loc in enumerate(occ.local):
        assert loc.shape == (mdp.state_sizes[i], mdp.action_sizes[i])
        assert loc.sum() == pytest.approx(occ.mass)


def test_finite_horizon_occupancy():
    mdp, pol, _ = random_instance(7)
    occ = exact_occupancy(mdp, pol, horizon=12)
    np.testing.assert_allclose(occ.joint, brute_force_occupancy(mdp, pol, 12), atol=1e-12)
    assert occ.mass == pytest.approx((1 - mdp.gamma ** 12) / (1 - mdp.gamma), abs=1e-12)


def test_single_state_occupancy():
    mdp = single_agent_mdp(np.ones((1, 3, 1)), 0.9)
    pol = LocalizedPolicy.for_mdp(mdp, 0).with_theta([np.array([[0.3, -1.0, 2.0]])])
    np.testing.assert_allclose(exact_occupancy(mdp, pol).joint, pol.global_matrix() / 0.1, rtol=1e-12)


def test_monte_carlo_occupancy_within_three_bounds():
    mdp = make_spatial_mdp(named_graph("line", 2), [2, 2], [2, 2], [1, 0.3], 0.8, seed=0)
    pol = LocalizedPolicy.for_mdp(mdp, 1, init="uniform", seed=1)
    H = int(np.ceil(np.log(1e-6) / np.log(0.8)))
    B = 100_000
    batch = sample_batch(mdp, pol, B, H, seed=3)
    occ = exact_occupancy(mdp, pol)
    bound = occupancy_error_bound(0.8, H, B, 0.01)
    for i in range(2):
        lam = estimate_local_occupancy(batch, i, 0.8, (2, 2))
        assert np.linalg.norm(lam - occ.local[i]) <= 3 * bound


def test_q_constant_reward():
    mdp, pol, _ = random_instance(2)
    q = exact_q(mdp, pol, np.full((mdp.state_sizes[0], mdp.action_sizes[0]), 2.5), 0)
    np.testing.assert_allclose(q, 2.5 / (1 - mdp.gamma), rtol=1e-12)


def test_q_myopic():
    m, pol, _ = random_instance(3)
    mdp = FactoredMDP(m.graph, m.state_sizes, m.action_sizes, m.kernels, m.xi, 0.0)
    r = np.random.default_rng(0).normal(size=(mdp.state_sizes[1], mdp.action_sizes[1]))
    q = exact_q(mdp, pol, r, 1)
    s1 = mdp.states.decode(np.arange(mdp.states.size))[:, 1]
    a1 = mdp.actions.decode(np.arange(mdp.actions.size))[:, 1]
    np.testing.assert_allclose(q, r[s1][:, a1], atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_bellman_residual(seed):
    mdp, pol, utils = random_instance(seed)
    ev = ExactEvaluator(mdp, pol)
    _, rewards, qs = ev.shadow_q(utils)
    P = mdp.global_transition()
    pi = pol.global_matrix()
    s_tab = mdp.states.decode(np.arange(mdp.states.size))
    a_tab = mdp.actions.decode(np.arange(mdp.actions.size))
    for i, (r, q) in enumerate(zip(rewards, qs)):
        R = r[s_tab[:, i]][:, a_tab[:, i]]
        V = (pi * q).sum(axis=1)
        resid = q - R - mdp.gamma * P @ V
        assert np.abs(resid).max() <= BELLMAN_TOL


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    mdp, pol, utils = random_instance(100 + seed, n=2)
    assert _rel(finite_difference_gradient(mdp, pol, utils, 1e-5), exact_policy_gradient(mdp, pol, utils)) <= 1e-5


def test_linear_gradient_matches_advantage_form():
    rng = np.random.default_rng(1)
    mdp, pol, _ = random_instance(8)
    utils = random_utilities(mdp, rng, kinds=("linear",))
    rewards = [u.reward for u in utils]
    assert _rel(advantage_policy_gradient(mdp, pol, rewards), exact_policy_gradient(mdp, pol, utils)) <= 1e-10


def test_saturated_optimal_bandit_policy():
    # transitions ignore the action, so the greedy policy is optimal
    base = np.array([[0.6, 0.4], [0.3, 0.7]])
    P = np.repeat(base[:, None, :], 2, axis=1)
    mdp = single_agent_mdp(P, 0.8)
    r = np.array([[1.0, 0.2], [-0.5, 0.4]])
    theta = np.where(r == r.max(axis=1, keepdims=True), 50.0, -50.0)
    pol = LocalizedPolicy.for_mdp(mdp, 0).with_theta([theta])
    g = exact_policy_gradient(mdp, pol, [LinearUtility(r)])
    assert np.linalg.norm(g[0]) <= 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_truncated_gradient_at_full_radius(seed):
    mdp, _, utils = random_instance(200 + seed)
    pol = LocalizedPolicy.for_mdp(mdp, mdp.graph.diameter, init="uniform", seed=seed)
    exact = exact_policy_gradient(mdp, pol, utils)
    trunc = exact_truncated_gradient(mdp, pol, utils, mdp.graph.diameter)
    for a, b in zip(trunc, exact):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_decoupled_truncation_is_exact():
    mdp = decoupled_mdp(3, [2, 3, 2], [2, 2, 3], 0.9, seed=2)
    pol = LocalizedPolicy.for_mdp(mdp, 0, init="uniform", seed=0)
    utils = random_utilities(mdp, np.random.default_rng(0))
    for a, b in zip(exact_truncated_gradient(mdp, pol, utils, 0), exact_policy_gradient(mdp, pol, utils)):
        np.testing.assert_allclose(a, b, atol=1e-10)
    assert np.all(measure_decay(mdp, pol, utils) <= 1e-12)
    assert np.all(truncation_errors(mdp, pol, utils)["q_error"] <= 1e-10)


def test_decay_vanishes_at_diameter():
    mdp, pol, utils = random_instance(11, n=3)
    table = measure_decay(mdp, pol, utils)
    assert table.shape == (3, mdp.graph.diameter + 1)
    assert np.all(table[:, -1] == 0)


@pytest.mark.parametrize("seed", range(3))
def test_zero_expectation_identity(seed):
    mdp, pol, utils = random_instance(300 + seed, n=3, kappa=0)
    assert zero_expectation_residual(mdp, pol, utils, 0).max() <= 1e-10


def test_influence_matrix_decoupled():
    mdp = decoupled_mdp(3, [2, 2, 3], [2, 3, 2], 0.9, seed=1)
    M = influence_matrix(mdp).M
    assert np.all(M[~np.eye(3, dtype=bool)] == 0)
    assert np.all((np.diag(M) >= 0) & (np.diag(M) <= 1))


def test_influence_of_point_mass_flip():
    g = build_graph(2, [(0, 1)])
    nS, nA = 4, 4
    a1 = np.array([a % 2 for a in range(nA)])  # agent 1's local action
    K0 = np.zeros((nS, nA, 2))
    K0[:, np.arange(nA), a1] = 1.0
    K1 = np.full((nS, nA, 2), 0.5)
    mdp = FactoredMDP(g, (2, 2), (2, 2), (K0, K1), uniform_xi([2, 2]), 0.9)
    M = influence_matrix(mdp).M
    assert M[0, 1] == 1.0 and M[0, 0] == 0.0 and M[1, 0] == 0.0


def test_influence_bounded_by_generator_weights():
    strength = [1.0, 0.2, 0.04]
    g = named_graph("line", 5)
    mdp = make_spatial_mdp(g, [2] * 5, [2] * 5, strength, 0.9, seed=0)
    M = influence_matrix(mdp).M
    for i in range(5):
        w = np.array([strength[int(d)] if d < len(strength) else 0.0 for d in g.dist[i]])
        assert np.all(M[i] <= w / w.sum() + 1e-12)


def test_oracle_size_caps():
    mdp, pol, _ = random_instance(0)
    with pytest.raises(OracleError, match="max_global_pairs"):
        ExactEvaluator(mdp, pol, OracleLimits(max_global_pairs=3))
    with pytest.raises(OracleError, match="max_kernel_rows"):
        influence_matrix(mdp, OracleLimits(max_kernel_rows=3))


def test_certificate_zero_matrix():
    dist = named_graph("line", 3).dist
    cert = certify_decay(InfluenceMatrix(np.zeros((3, 3)), dist), 2.0, 0.9, 1.0)
    assert cert.rho == 0 and cert.holds and cert.c0 == 0
    assert cert.phi0 == pytest.approx(np.exp(-2.0))


def test_certificate_diagonal():
    dist = named_graph("line", 3).dist
    M = InfluenceMatrix(np.eye(3) * 0.7, dist)
    rhos = {certify_decay(M, b, 0.9, 1.0).rho for b in (0.25, 1.0, 3.0)}
    assert rhos == {0.7}
    cert = certify_decay(M, 1.0, 0.9, 2.0)
    assert cert.c0 == pytest.approx(2 * 0.9 * 0.7 * 2.0 / (1 - 0.63))


def test_certificate_both_branches():
    g = named_graph("line", 4)
    mdp = make_spatial_mdp(g, [2] * 4, [2] * 4, [1.0, 0.2, 0.04], 0.9, seed=1)
    M = influence_matrix(mdp)
    cert = certify_decay(M, np.log(5), 0.9, 1.0)
    rho = max(sum(np.exp(np.log(5) * g.dist[i, j]) * M.M[i, j] for j in range(4)) for i in range(4))
    assert cert.rho == pytest.approx(rho)
    assert cert.holds == (rho < 1 / 0.9)
    strong = make_spatial_mdp(g, [2] * 4, [2] * 4, [1.0, 1.0, 1.0], 0.9, seed=1, concentration=0.05)
    failed = certify_decay(influence_matrix(strong), 3.0, 0.9, 1.0)
    assert not failed.holds and np.isinf(failed.bound(1))


def test_search_prefers_holding_certificates():
    mdp, _, _ = random_instance(5)
    cert = search_certificate(influence_matrix(mdp), mdp.gamma, 1.0)
    assert cert.beta in np.arange(0.25, 3.01, 0.25)


def test_entropy_q_bounded():
    mdp, pol, _ = random_instance(6)
    u = EntropyUtility(mdp.gamma)
    _, _, qs = ExactEvaluator(mdp, pol).shadow_q([u] * mdp.n_agents)
    assert max(np.abs(q).max() for q in qs) <= u.grad_bound(mdp.gamma) / (1 - mdp.gamma) + 1e-12
