import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shadowmarl.graph import named_graph
from shadowmarl.mdp import make_spatial_mdp
from shadowmarl.policy import (
    CHECKPOINT_FORMAT,
    SCORE_NORM_BOUND,
    LocalizedPolicy,
    load_policy,
    make_decaying_policy,
    policy_locality_gap,
    save_policy,
    truncate_policy,
)

from helpers import all_tuples, random_instance


def _policy(seed=0, kappa=1, n=3):
    mdp = make_spatial_mdp(named_graph("line", n), [2, 3, 2][:n], [3, 2, 2][:n], [1, 0.3], 0.9, seed=seed)
    p = LocalizedPolicy.for_mdp(mdp, kappa)
    rng = np.random.default_rng(seed)
    return mdp, p.from_flat(rng.normal(size=p.flat_params().size))


def test_zero_logits_are_uniform():
    mdp, _ = _policy()
    p = LocalizedPolicy.for_mdp(mdp, 1)
    for i in range(3):
        np.testing.assert_allclose(p.action_probs(i, (1, 2, 0)), 1.0 / mdp.action_sizes[i])


def test_saturated_logit():
    mdp, p = _policy()
    theta = [np.zeros_like(t) for t in p.theta]
    theta[0][:, 1] = 50.0
    q = p.with_theta(theta)
    assert q.action_probs(0, (0, 0, 0))[1] >= 1 - 1e-20


def test_shift_invariance():
    mdp, p = _policy()
    shifted = p.with_theta([t + 3.7 for t in p.theta])
    for s in all_tuples(mdp.state_sizes):
        np.testing.assert_allclose(shifted.action_probs(1, s), p.action_probs(1, s), atol=1e-15)


def test_rows_stochastic_and_product_form():
    mdp, p = _policy(seed=2)
    for i in range(3):
        np.testing.assert_allclose(p.probs_table(i).sum(axis=1), 1.0, atol=1e-12)
    G = p.global_matrix()
    np.testing.assert_allclose(G.sum(axis=1), 1.0, atol=1e-12)
    for s_flat, s in enumerate(all_tuples(mdp.state_sizes)):
        for a_flat, a in enumerate(all_tuples(mdp.action_sizes)):
            expect = np.prod([p.action_probs(i, s)[a[i]] for i in range(3)])
            assert G[s_flat, a_flat] == pytest.approx(expect, rel=1e-12)


def test_policy_only_reads_its_neighborhood():
    mdp, p = _policy(kappa=0)
    assert np.all(policy_locality_gap(p, 0) == 0)
    # agent 0 at radius 0 ignores agents 1 and 2
    np.testing.assert_array_equal(p.action_probs(0, (1, 0, 0)), p.action_probs(0, (1, 2, 1)))


def test_uniform_binary_score():
    mdp = make_spatial_mdp(named_graph("line", 2), [2, 2], [2, 2], [1, 0.3], 0.9)
    p = LocalizedPolicy.for_mdp(mdp, 1)
    sc = p.score(0, (1, 0), 0)
    row = p.local_state(0, (1, 0))
    np.testing.assert_allclose(sc[row], [0.5, -0.5])
    assert np.count_nonzero(np.delete(sc, row, axis=0)) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_score_zero_mean_and_bounded(seed):
    mdp, policy, _ = random_instance(seed)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        s = tuple(int(rng.integers(k)) for k in mdp.state_sizes)
        i = int(rng.integers(mdp.n_agents))
        probs = policy.action_probs(i, s)
        total = sum(pb * policy.score(i, s, b) for b, pb in enumerate(probs))
        assert np.abs(total).max() <= 1e-10
        norms = [np.linalg.norm(policy.score(i, s, b)) for b in range(len(probs))]
        assert max(norms) <= SCORE_NORM_BOUND + 1e-12
        assert max(norms) <= 2.0


def test_score_matches_finite_differences():
    mdp, p = _policy(seed=4)
    s, h = (1, 2, 0), 1e-6
    for i in range(3):
        for a_i in range(mdp.action_sizes[i]):
            sc = p.score(i, s, a_i)
            fd = np.zeros_like(sc)
            for idx in np.ndindex(sc.shape):
                plus = [t.copy() for t in p.theta]
                minus = [t.copy() for t in p.theta]
                plus[i][idx] += h
                minus[i][idx] -= h
                fd[idx] = (p.with_theta(plus).log_prob(i, s, a_i) - p.with_theta(minus).log_prob(i, s, a_i)) / (2 * h)
            np.testing.assert_allclose(fd, sc, atol=1e-4)


def test_truncation_at_full_radius_is_identity():
    g = named_graph("line", 3)
    p = make_decaying_policy(g, [2, 2, 2], [2, 2, 2], 0.5, seed=1)
    t = truncate_policy(p, p.kappa)
    for a, b in zip(t.theta, p.theta):
        np.testing.assert_array_equal(a, b)


def test_truncation_lossless_without_far_dependence():
    g = named_graph("line", 4)
    p = make_decaying_policy(g, [2] * 4, [2] * 4, 0.0, seed=1)
    # decay 0 keeps only the own coordinate
    t = truncate_policy(p, 0)
    for s in all_tuples([2] * 4):
        for i in range(4):
            np.testing.assert_allclose(t.action_probs(i, s), p.action_probs(i, s), atol=1e-15)


@pytest.mark.parametrize("decay", [0.2, 0.5])
def test_truncation_tv_within_decay_bound(decay):
    g = named_graph("line", 5)
    scale = 1.5
    p = make_decaying_policy(g, [2] * 5, [3] * 5, decay, scale=scale, seed=7)
    for kappa in range(g.diameter + 1):
        t = truncate_policy(p, kappa)
        for i in range(5):
            far = [d for d in g.dist[i] if d > kappa]
            # TV of two softmax rows is at most the sup change of the logits
            bound = sum(2 * scale * decay ** d for d in far)
            tv = max(0.5 * np.abs(t.action_probs(i, s) - p.action_probs(i, s)).sum() for s in all_tuples([2] * 5))
            assert tv <= bound + 1e-12
            assert policy_locality_gap(p, kappa)[i] <= bound + 1e-12


def test_truncate_rejects_larger_radius():
    _, p = _policy(kappa=0)
    with pytest.raises(ValueError):
        truncate_policy(p, 1)


def test_checkpoint_round_trip(tmp_path):
    mdp, p = _policy(seed=3)
    path = tmp_path / "policy.json"
    save_policy(p, path)
    doc = json.loads(path.read_text())
    assert doc["format"] == CHECKPOINT_FORMAT
    assert "index_order" in doc
    q = load_policy(path)
    assert q.kappa == p.kappa and q.compatible_with(mdp)
    for a, b in zip(q.theta, p.theta):
        np.testing.assert_array_equal(a, b)


def test_shape_validation():
    mdp, p = _policy()
    with pytest.raises(ValueError):
        p.with_theta([np.zeros((1, 1))] * 3)
    with pytest.raises(ValueError):
        LocalizedPolicy.for_mdp(mdp, 1, init="gaussian")


def test_uniform_init_range():
    mdp, _ = _policy()
    p = LocalizedPolicy.for_mdp(mdp, 1, init="uniform", seed=5)
    flat = p.flat_params()
    assert flat.min() >= -0.1 and flat.max() <= 0.1 and np.ptp(flat) > 0
