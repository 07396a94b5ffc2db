"""Sample-based estimators used by each training iteration.

* local occupancy from a batch of trajectories,
* truncated shadow Q-functions (TD learning along one shared path, or the
  exact oracle with anchored coordinates),
* the truncated policy gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import neighborhood
from .mdp import Batch, FactoredMDP, GlobalIndexer, sample_path
from .policy import LocalizedPolicy

__all__ = [
    "TruncatedQTable",
    "StepSchedule",
    "QEstimator",
    "TDQEstimator",
    "ExactQEstimator",
    "estimate_local_occupancy",
    "occupancy_mass",
    "occupancy_error_bound",
    "td_truncated_q",
    "td_truncated_q_all",
    "exact_truncated_q",
    "truncated_gradient",
]


@dataclass
class TruncatedQTable:
    """Q-table of agent ``agent`` over ``S_N x A_N`` with ``N = N_agent^kappa``.

    ``values[x, y]``: ``x`` is the flat neighborhood state, ``y`` the flat
    neighborhood action (both C-order over ascending agent ids).
    """

    agent: int
    kappa: int
    members: tuple[int, ...]
    values: np.ndarray
    state_proj: np.ndarray = field(repr=False)
    action_proj: np.ndarray = field(repr=False)
    visits: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, mdp: FactoredMDP, agent: int, kappa: int) -> "TruncatedQTable":
        members = neighborhood(mdp.graph, kappa)[agent]
        sp = mdp.states.projection_table(members)
        ap = mdp.actions.projection_table(members)
        shape = (mdp.states.sub(members).size, mdp.actions.sub(members).size)
        return cls(agent, kappa, members, np.zeros(shape), sp, ap)

    def cells(self, state_index, action_index) -> np.ndarray:
        """Flat cell index for global flat ``(state, action)`` arrays."""
        return self.state_proj[state_index] * self.values.shape[1] + self.action_proj[action_index]

    def lookup(self, state_index, action_index) -> np.ndarray:
        return self.values.ravel()[self.cells(state_index, action_index)]

    def broadcast(self) -> np.ndarray:
        """Table expanded to the global ``(|S|, |A|)`` grid."""
        return self.values[self.state_proj[:, None], self.action_proj[None, :]]

    @property
    def coverage(self) -> float:
        if self.visits is None:
            return 1.0
        return float((self.visits > 0).mean())


def estimate_local_occupancy(batch: Batch, i: int, gamma: float, shape: tuple[int, int]) -> np.ndarray:
    """Discounted empirical visitation of ``(s_i, a_i)``, averaged over the batch.

    The result sums to ``(1 - gamma**H) / (1 - gamma)``.
    """
    B, H = batch.states.shape[:2]
    disc = np.broadcast_to(gamma ** np.arange(H), (B, H))
    flat = batch.states[:, :, i] * shape[1] + batch.actions[:, :, i]
    lam = np.bincount(flat.ravel(), weights=disc.ravel(), minlength=shape[0] * shape[1])
    return lam.reshape(shape) / B


def occupancy_mass(gamma: float, H: int | None) -> float:
    """Total mass of the discounted occupancy truncated at ``H`` (``None`` means no truncation)."""
    if H is None:
        return 1.0 / (1.0 - gamma)
    return float(np.sum(gamma ** np.arange(H)))


def occupancy_error_bound(gamma: float, H: int, B: int, delta0: float) -> float:
    """High-probability bound on ``||lambda_tilde_i - lambda_i||_2`` (failure probability ``delta0``)."""
    if not 0.0 < delta0 < 1.0:
        raise ValueError("delta0 must lie in (0, 1)")
    num = 4.0 + 2.0 * gamma ** (2 * H) * B - 16.0 * np.log(delta0)
    return float(np.sqrt(num / ((1.0 - gamma) ** 2 * B)))


@dataclass(frozen=True)
class StepSchedule:
    """TD step sizes ``eta_k = h / (k + k0)``."""

    h: float = 10.0
    k0: float = 100.0

    def __call__(self, k):
        return self.h / (np.asarray(k, dtype=float) + self.k0)


def _td_pass(values: np.ndarray, cells: list, rewards: list, etas: list, gamma: float) -> None:
    q = values.ravel()
    for k in range(1, len(cells)):
        c = cells[k - 1]
        eta = etas[k - 1]
        q[c] = (1.0 - eta) * q[c] + eta * (rewards[k - 1] + gamma * q[cells[k]])


def td_truncated_q_all(
    mdp: FactoredMDP,
    policy: LocalizedPolicy,
    rewards: Sequence[np.ndarray],
    kappa: int,
    H_q: int,
    schedule: StepSchedule,
    rng: np.random.Generator,
    agents: Sequence[int] | None = None,
) -> dict[int, TruncatedQTable]:
    """TD estimates of every agent's truncated Q along one common trajectory."""
    if H_q < 2:
        raise ValueError("TD needs a trajectory of length at least 2")
    s_path, a_path = sample_path(mdp, policy, H_q, rng)
    etas = schedule(np.arange(H_q)).tolist()
    local_s = mdp.states.decode(s_path)
    local_a = mdp.actions.decode(a_path)
    agents = range(mdp.n_agents) if agents is None else agents
    out = {}
    for i in agents:
        table = TruncatedQTable.zeros(mdp, i, kappa)
        cells = table.cells(s_path, a_path)
        r = np.asarray(rewards[i], dtype=float)[local_s[:, i], local_a[:, i]]
        _td_pass(table.values, cells.tolist(), r.tolist(), etas, mdp.gamma)
        table.visits = np.bincount(cells[:-1], minlength=table.values.size).reshape(table.values.shape)
        out[i] = table
    return out


def td_truncated_q(
    mdp: FactoredMDP,
    policy: LocalizedPolicy,
    reward_i: np.ndarray,
    i: int,
    kappa: int,
    H_q: int,
    schedule: StepSchedule,
    rng: np.random.Generator,
) -> TruncatedQTable:
    rewards = [None] * mdp.n_agents
    rewards[i] = reward_i
    return td_truncated_q_all(mdp, policy, rewards, kappa, H_q, schedule, rng, agents=[i])[i]


def _anchored_indices(indexer: GlobalIndexer, members: Sequence[int], anchor) -> np.ndarray:
    sub = indexer.sub(members)
    anchor = np.zeros(len(indexer.sizes), dtype=np.int64) if anchor is None else np.asarray(anchor, dtype=np.int64)
    coords = np.tile(anchor, (sub.size, 1))
    coords[:, list(members)] = sub.decode(np.arange(sub.size))
    return indexer.encode(coords)


def exact_truncated_q(
    full_q: np.ndarray,
    mdp: FactoredMDP,
    i: int,
    kappa: int,
    anchor: tuple | None = None,
) -> TruncatedQTable:
    """Freeze coordinates outside ``N_i^kappa`` of a full ``(|S|, |A|)`` Q at the anchor.

    ``anchor`` is ``(state_tuple, action_tuple)``; all zeros by default.
    """
    s_bar, a_bar = (None, None) if anchor is None else anchor
    table = TruncatedQTable.zeros(mdp, i, kappa)
    gs = _anchored_indices(mdp.states, table.members, s_bar)
    ga = _anchored_indices(mdp.actions, table.members, a_bar)
    table.values = np.asarray(full_q)[np.ix_(gs, ga)].copy()
    return table


class QEstimator:
    """Produces truncated Q tables for all agents under given local rewards."""

    def estimate(self, mdp, policy, rewards, kappa, rng) -> dict[int, TruncatedQTable]:
        raise NotImplementedError


@dataclass
class TDQEstimator(QEstimator):
    H_q: int = 2000
    schedule: StepSchedule = field(default_factory=StepSchedule)

    def estimate(self, mdp, policy, rewards, kappa, rng):
        return td_truncated_q_all(mdp, policy, rewards, kappa, self.H_q, self.schedule, rng)


@dataclass
class ExactQEstimator(QEstimator):
    """Oracle estimator: exact shadow Q under the supplied rewards, then truncated."""

    anchor: tuple | None = None

    def estimate(self, mdp, policy, rewards, kappa, rng=None):
        from .oracle import ExactEvaluator

        qs = ExactEvaluator(mdp, policy).q_functions(rewards)
        return {i: exact_truncated_q(qs[i], mdp, i, kappa, self.anchor) for i in range(mdp.n_agents)}


def truncated_gradient(
    batch: Batch,
    policy: LocalizedPolicy,
    q_tables: Mapping[int, TruncatedQTable],
    i: int,
    gamma: float,
) -> np.ndarray:
    """Sampled truncated policy gradient for agent ``i``.

    ``(1/B) sum_tau sum_k gamma^k psi_i(a_i^k | s_Ni^k) (1/n) sum_{j in N_i^kappa} Q_j``
    where ``kappa`` is the radius of the supplied tables.
    """
    kappas = {t.kappa for t in q_tables.values()}
    if len(kappas) != 1:
        raise ValueError(f"Q tables must share one radius, got {sorted(kappas)}")
    kappa = kappas.pop()
    members = neighborhood(policy.graph, kappa)[i]
    missing = [j for j in members if j not in q_tables]
    if missing:
        raise KeyError(f"agent {i} needs Q tables of neighbors {missing}")

    B, H = batch.state_index.shape
    n = policy.n_agents
    qsum = np.zeros((B, H))
    for j in members:
        qsum += q_tables[j].lookup(batch.state_index, batch.action_index)
    w = (gamma ** np.arange(H))[None, :] * qsum / n

    x = policy.state_projection(i)[batch.state_index]
    a_i = batch.actions[:, :, i]
    n_rows, n_act = policy.theta[i].shape
    hits = np.bincount((x * n_act + a_i).ravel(), weights=w.ravel(), minlength=n_rows * n_act)
    totals = np.bincount(x.ravel(), weights=w.ravel(), minlength=n_rows)
    grad = hits.reshape(n_rows, n_act) - policy.probs_table(i) * totals[:, None]
    return grad / B
