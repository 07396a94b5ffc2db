"""Local general utilities ``f_i(lambda_i)`` and their shadow rewards.

Occupancies are unnormalized: a full-horizon local occupancy sums to
``1 / (1 - gamma)``. All tables are shaped ``(|S_i|, |A_i|)``.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .mdp import FactoredMDP
    from .policy import LocalizedPolicy

__all__ = [
    "LocalUtility",
    "LinearUtility",
    "EntropyUtility",
    "DistanceUtility",
    "utility_value",
    "shadow_reward",
    "global_objective",
]

NEG_TOL = 1e-12


def _check_occupancy(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 2:
        raise ValueError(f"local occupancy must be a 2-d (state, action) table, got shape {lam.shape}")
    if lam.min() < -NEG_TOL:
        raise ValueError(f"occupancy has negative entry {lam.min():.3e}")
    return lam


class LocalUtility:
    kind: str = "abstract"

    def value(self, lam: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_bound(self, gamma: float) -> float:
        """Sup-norm bound on the gradient over the occupancy polytope."""
        raise NotImplementedError

    def lipschitz_bound(self, gamma: float, n_actions: int) -> float:
        """``L`` with ``||grad(l) - grad(l')||_inf <= L ||l - l'||_2``."""
        raise NotImplementedError


class LinearUtility(LocalUtility):
    """``<r_i, lambda_i>``, i.e. a standard local reward."""

    kind = "linear"

    def __init__(self, reward):
        self.reward = np.asarray(reward, dtype=float)
        self.shape = self.reward.shape

    def value(self, lam):
        return float((self.reward * _check_occupancy(lam)).sum())

    def gradient(self, lam):
        _check_occupancy(lam)
        return self.reward.copy()

    def grad_bound(self, gamma):
        return float(np.abs(self.reward).max())

    def lipschitz_bound(self, gamma, n_actions):
        return 0.0


class EntropyUtility(LocalUtility):
    """Smoothed local state entropy ``-sum_s d(s) log(d(s) + eps)``.

    ``d(s) = (1 - gamma) sum_a lambda_i(s, a)``. The ``eps`` keeps the
    gradient bounded as ``d(s) -> 0``.
    """

    kind = "entropy"

    def __init__(self, gamma: float, eps: float = 1e-6):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = float(gamma)
        self.eps = float(eps)

    def _state_marginal(self, lam):
        return (1.0 - self.gamma) * _check_occupancy(lam).sum(axis=1)

    def value(self, lam):
        d = self._state_marginal(lam)
        return float(-(d * np.log(d + self.eps)).sum())

    def gradient(self, lam):
        lam = _check_occupancy(lam)
        d = self._state_marginal(lam)
        g = -(1.0 - self.gamma) * (np.log(d + self.eps) + d / (d + self.eps))
        return np.repeat(g[:, None], lam.shape[1], axis=1)

    def grad_bound(self, gamma=None):
        # log(d+eps) + d/(d+eps) is increasing on [0, 1]
        return (1.0 - self.gamma) * max(abs(np.log(self.eps)), 1.0 + self.eps)

    def lipschitz_bound(self, gamma=None, n_actions: int = 1):
        return 2.0 * (1.0 - self.gamma) ** 2 * np.sqrt(n_actions) / self.eps


class DistanceUtility(LocalUtility):
    """``-||lambda_i - target||_2^2`` (apprenticeship-style matching)."""

    kind = "distance"

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)
        self.shape = self.target.shape

    def value(self, lam):
        diff = _check_occupancy(lam) - self.target
        return float(-(diff ** 2).sum())

    def gradient(self, lam):
        return -2.0 * (_check_occupancy(lam) - self.target)

    def grad_bound(self, gamma):
        return 2.0 * (1.0 / (1.0 - gamma) + float(np.abs(self.target).sum()))

    def lipschitz_bound(self, gamma, n_actions):
        return 2.0


def utility_value(u: LocalUtility, lambda_i) -> float:
    return u.value(lambda_i)


def shadow_reward(u: LocalUtility, lambda_i) -> np.ndarray:
    """Gradient of ``u`` at ``lambda_i``: the agent's shadow reward table."""
    return u.gradient(lambda_i)


def objective_from_occupancy(local_occupancies: Sequence[np.ndarray], utilities: Sequence[LocalUtility]) -> float:
    return float(np.mean([u.value(lam) for u, lam in zip(utilities, local_occupancies)]))


def global_objective(mdp: "FactoredMDP", policy: "LocalizedPolicy", utilities: Sequence[LocalUtility]) -> float:
    """``F(theta) = (1/n) sum_i f_i(lambda_i)`` at the exact occupancy."""
    from .oracle import exact_occupancy

    occ = exact_occupancy(mdp, policy)
    return objective_from_occupancy(occ.local, utilities)
