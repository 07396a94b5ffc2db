import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from shadowmarl.estimator import ShadowRewardPolicyGradient
from shadowmarl.graph import named_graph
from shadowmarl.mdp import make_spatial_mdp
from shadowmarl.utility import EntropyUtility, LinearUtility, global_objective
from shadowmarl.validation import check_kappa, check_mdp, check_states, check_utilities


@pytest.fixture
def problem():
    mdp = make_spatial_mdp(named_graph("line", 3), [2, 3, 2], [2, 2, 2], [1.0, 0.3], 0.8, seed=0)
    rng = np.random.default_rng(0)
    utils = [LinearUtility(rng.uniform(-1, 1, (mdp.state_sizes[i], 2))) for i in range(3)]
    return mdp, utils


def test_params_round_trip():
    est = ShadowRewardPolicyGradient(kappa=2, n_iter=7)
    params = est.get_params()
    assert params["kappa"] == 2 and params["n_iter"] == 7
    twin = clone(est).set_params(batch_size=5)
    assert twin.batch_size == 5 and est.batch_size == 64


def test_fit_predict(problem):
    mdp, utils = problem
    est = ShadowRewardPolicyGradient(n_iter=30, q_estimator="exact", gradient="exact").fit(mdp, utils)
    assert est.n_iter_ == 30 and est.violations_ == []
    states = np.array([[0, 0, 0], [1, 2, 1]])
    probs = est.predict_proba(states)
    assert len(probs) == 3 and all(p.shape == (2, 2) for p in probs)
    np.testing.assert_allclose(probs[1][1], est.policy_.action_probs(1, (1, 2, 1)))
    acts = est.predict(states)
    assert acts.shape == (2, 3)
    # flat indices give the same answer
    flat = [mdp.states.encode(tuple(s)) for s in states]
    np.testing.assert_array_equal(est.predict(np.array(flat)), acts)
    start = global_objective(mdp, est.policy_.with_theta([np.zeros_like(t) for t in est.policy_.theta]), utils)
    assert est.score(mdp, utils) > start
    assert est.stationarity().holds


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        ShadowRewardPolicyGradient().predict([[0, 0]])


def test_single_utility_broadcasts(problem):
    mdp, _ = problem
    est = ShadowRewardPolicyGradient(n_iter=2, batch_size=8, td_horizon=100, eta=1.0).fit(mdp, EntropyUtility(0.8))
    assert est.n_iter_ == 2


def test_validation_helpers(problem):
    mdp, utils = problem
    with pytest.raises(TypeError):
        check_mdp("mdp")
    with pytest.raises(ValueError):
        check_utilities(utils[:2], mdp)
    with pytest.raises(ValueError):
        check_utilities([LinearUtility(np.zeros((5, 5)))] * 3, mdp)
    with pytest.raises(TypeError):
        check_utilities([1, 2, 3], mdp)
    with pytest.raises(ValueError):
        check_states([[0, 3, 0]], mdp.state_sizes)
    with pytest.raises(ValueError):
        check_states([12], mdp.state_sizes)
    with pytest.raises(TypeError):
        check_states([[0.5, 0, 0]], mdp.state_sizes)
    np.testing.assert_array_equal(check_states([5], mdp.state_sizes), [[0, 2, 1]])
    for bad in (-1, 1.5, True):
        with pytest.raises(ValueError):
            check_kappa(bad)
