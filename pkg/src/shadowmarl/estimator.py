"""scikit-learn style wrapper around the training loop.

``fit(mdp, utilities)`` plays the role of ``fit(X, y)``: the instance is the
data and the per-agent utilities are the target. The fitted localized policy
answers ``predict_proba`` (per-agent action distributions) and ``predict``
(greedy joint action) for batches of global states.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .mdp import FactoredMDP
from .trainer import TrainConfig, evaluate_stationarity, train
from .utility import global_objective
from .validation import check_kappa, check_mdp, check_states, check_utilities

__all__ = ["ShadowRewardPolicyGradient"]

class ShadowRewardPolicyGradient(BaseEstimator):
    """Distributed policy gradient with shadow rewards and localized softmax policies."""

    def __init__(
        self,
        kappa: int = 1,
        n_iter: int = 100,
        batch_size: int = 64,
        horizon: int | None = None,
        td_horizon: int = 2000,
        eta="auto",
        eta_init: float = 8.0,
        q_estimator: str = "td",
        gradient: str = "sampled",
        td_h: float = 10.0,
        td_k0: float = 100.0,
        theta_init: str = "zeros",
        oracle="auto",
        random_state: int = 0,
    ):
        self.kappa = kappa
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.horizon = horizon
        self.td_horizon = td_horizon
        self.eta = eta
        self.eta_init = eta_init
        self.q_estimator = q_estimator
        self.gradient = gradient
        self.td_h = td_h
        self.td_k0 = td_k0
        self.theta_init = theta_init
        self.oracle = oracle
        self.random_state = random_state

    def _config(self, gamma: float) -> TrainConfig:
        H = self.horizon
        if H is None:
            # truncate once gamma^H drops below 1e-3
            H = max(1, int(np.ceil(np.log(1e-3) / np.log(gamma)))) if gamma > 0 else 1
        return TrainConfig(
            T=int(self.n_iter),
            B=int(self.batch_size),
            H=int(H),
            H_q=int(self.td_horizon),
            kappa=check_kappa(self.kappa),
            eta=self.eta,
            eta_init=float(self.eta_init),
            q_estimator=self.q_estimator,
            gradient=self.gradient,
            td_h=float(self.td_h),
            td_k0=float(self.td_k0),
            theta_init=self.theta_init,
            seed=int(self.random_state),
            oracle=self.oracle,
        )

    def fit(self, mdp: FactoredMDP, utilities, run_dir=None):
        mdp = check_mdp(mdp)
        utilities = check_utilities(utilities, mdp)
        cfg = self._config(mdp.gamma)
        result = train(mdp, utilities, cfg, run_dir=run_dir)
        self.config_ = cfg
        self.policy_ = result.policy
        self.metrics_ = result.metrics
        self.eta_ = result.eta
        self.violations_ = result.violations
        self.n_iter_ = len(result.metrics)
        self.n_agents_ = mdp.n_agents
        self.state_sizes_ = mdp.state_sizes
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per-agent action probabilities, one ``(m, |A_i|)`` array per agent."""
        check_is_fitted(self, "policy_")
        states = check_states(X, self.state_sizes_)
        flat = np.ravel_multi_index(states.T, self.state_sizes_)
        return [self.policy_.probs_table(i)[self.policy_.state_projection(i)[flat]] for i in range(self.n_agents_)]

    def predict(self, X) -> np.ndarray:
        """Greedy joint action as an ``(m, n)`` array of local action indices."""
        return np.stack([p.argmax(axis=1) for p in self.predict_proba(X)], axis=1)

    def score(self, mdp: FactoredMDP, utilities) -> float:
        """Exact global objective of the fitted policy."""
        check_is_fitted(self, "policy_")
        mdp = check_mdp(mdp)
        return global_objective(mdp, self.policy_, check_utilities(utilities, mdp))

    def stationarity(self):
        check_is_fitted(self, "metrics_")
        return evaluate_stationarity(self.metrics_)
