"""Exact computations on enumerable instances.

Everything here works on dense global tables, so it is only meant for
desk-scale problems (a few agents with two or three local states/actions).
The functions are the reference against which the sampled estimators and
the decay bounds are checked.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .estimation import TruncatedQTable, exact_truncated_q
from .graph import neighborhood
from .mdp import FactoredMDP
from .policy import SCORE_NORM_BOUND, LocalizedPolicy
from .utility import LocalUtility, objective_from_occupancy

__all__ = [
    "OracleError",
    "OracleLimits",
    "OccupancyMeasure",
    "ExactEvaluator",
    "InfluenceMatrix",
    "DecayCertificate",
    "exact_occupancy",
    "exact_q",
    "exact_policy_gradient",
    "exact_truncated_gradient",
    "expected_truncated_gradient",
    "zero_expectation_residual",
    "finite_difference_gradient",
    "advantage_policy_gradient",
    "influence_matrix",
    "certify_decay",
    "search_certificate",
    "measure_decay",
    "truncation_errors",
    "truncation_gradient_bound",
    "BETA_GRID",
]

BELLMAN_TOL = 1e-10
MASS_TOL = 1e-10
BETA_GRID = tuple(np.round(np.arange(0.25, 3.0001, 0.25), 2))


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleLimits:
    max_global_pairs: int = 200_000
    max_transition_entries: int = 50_000_000
    max_kernel_rows: int = 1_000_000


DEFAULT_LIMITS = OracleLimits()


def _check_limits(mdp: FactoredMDP, limits: OracleLimits) -> None:
    nS, nA = mdp.states.size, mdp.actions.size
    if nS * nA > limits.max_global_pairs:
        raise OracleError(
            f"{nS * nA} global state-action pairs exceed max_global_pairs={limits.max_global_pairs}"
        )
    if nS * nA * nS > limits.max_transition_entries:
        raise OracleError(
            f"{nS * nA * nS} transition entries exceed max_transition_entries={limits.max_transition_entries}"
        )


@dataclass(frozen=True)
class OccupancyMeasure:
    """Discounted occupancy: ``joint`` over ``(|S|, |A|)``, ``local[i]`` over ``(|S_i|, |A_i|)``."""

    joint: np.ndarray
    local: list[np.ndarray]

    @property
    def mass(self) -> float:
        return float(self.joint.sum())


def local_marginals(mdp: FactoredMDP, joint: np.ndarray) -> list[np.ndarray]:
    n = mdp.n_agents
    tensor = joint.reshape(mdp.state_sizes + mdp.action_sizes)
    out = []
    for i in range(n):
        others = tuple(ax for ax in range(2 * n) if ax not in (i, n + i))
        out.append(tensor.sum(axis=others))
    return out


def broadcast_local(mdp: FactoredMDP, i: int, table: np.ndarray) -> np.ndarray:
    """Lift an ``(|S_i|, |A_i|)`` table to the global ``(|S|, |A|)`` grid."""
    n = mdp.n_agents
    shape = [1] * (2 * n)
    shape[i] = mdp.state_sizes[i]
    shape[n + i] = mdp.action_sizes[i]
    full = np.broadcast_to(np.asarray(table).reshape(shape), mdp.state_sizes + mdp.action_sizes)
    return full.reshape(mdp.states.size, mdp.actions.size)


class ExactEvaluator:
    """Dense policy evaluation for one ``(mdp, policy)`` pair.

    Builds ``P(s'|s,a)``, the joint policy matrix and an LU factorization of
    ``I - gamma P_pi`` once, then answers occupancy and Q queries.
    """

    def __init__(self, mdp: FactoredMDP, policy: LocalizedPolicy, limits: OracleLimits = DEFAULT_LIMITS):
        if not policy.compatible_with(mdp):
            raise ValueError("policy spaces or graph do not match the MDP")
        _check_limits(mdp, limits)
        self.mdp = mdp
        self.policy = policy
        self.gamma = mdp.gamma
        self.P = mdp.global_transition()
        self.pi = policy.global_matrix()
        nS = mdp.states.size
        self.P_pi = np.einsum("sa,sat->st", self.pi, self.P)
        self._lu = scipy.linalg.lu_factor(np.eye(nS) - self.gamma * self.P_pi)

    def occupancy(self, horizon: int | None = None) -> OccupancyMeasure:
        """Discounted occupancy; ``horizon`` truncates the sum at ``H`` steps."""
        mdp = self.mdp
        if horizon is None:
            d = scipy.linalg.lu_solve(self._lu, mdp.xi, trans=1)
            expected = 1.0 / (1.0 - self.gamma)
        else:
            d = np.zeros(mdp.states.size)
            mu = mdp.xi.copy()
            for k in range(horizon):
                d += self.gamma ** k * mu
                mu = mu @ self.P_pi
            expected = (1.0 - self.gamma ** horizon) / (1.0 - self.gamma)
        joint = d[:, None] * self.pi
        if abs(joint.sum() - expected) > MASS_TOL * max(1.0, expected):
            raise OracleError(f"occupancy mass {joint.sum():.15g} != {expected:.15g}")
        return OccupancyMeasure(joint, local_marginals(mdp, joint))

    def q_functions(self, rewards: Sequence[np.ndarray | None]) -> list[np.ndarray | None]:
        """Exact Q of each local reward table; ``None`` entries are skipped."""
        nS, nA = self.mdp.states.size, self.mdp.actions.size
        idx = [i for i, r in enumerate(rewards) if r is not None]
        out: list[np.ndarray | None] = [None] * len(rewards)
        if not idx:
            return out
        R = np.stack([broadcast_local(self.mdp, i, rewards[i]) for i in idx], axis=-1)  # (S, A, m)
        r_pi = np.einsum("sa,sam->sm", self.pi, R)
        V = scipy.linalg.lu_solve(self._lu, r_pi)
        Q = R + self.gamma * np.einsum("sat,tm->sam", self.P, V)
        resid = Q - R - self.gamma * np.einsum("sat,tm->sam", self.P, np.einsum("ta,tam->tm", self.pi, Q))
        worst = float(np.abs(resid).max())
        if worst > BELLMAN_TOL:
            raise OracleError(f"Bellman residual {worst:.3e} exceeds {BELLMAN_TOL}")
        for k, i in enumerate(idx):
            out[i] = Q[:, :, k]
        return out

    def shadow_q(self, utilities: Sequence[LocalUtility]):
        """Occupancy, exact shadow rewards and the shadow Q-function of each agent."""
        occ = self.occupancy()
        rewards = [u.gradient(lam) for u, lam in zip(utilities, occ.local)]
        return occ, rewards, self.q_functions(rewards)

    def aggregate_score(self, i: int, weights: np.ndarray) -> np.ndarray:
        """``sum_{s,a} weights(s,a) psi_i(a_i | s_Ni)`` as a table shaped like ``theta[i]``."""
        mdp, policy = self.mdp, self.policy
        n = mdp.n_agents
        by_action = weights.reshape((mdp.states.size,) + mdp.action_sizes)
        others = tuple(1 + ax for ax in range(n) if ax != i)
        per_state = by_action.sum(axis=others)  # (|S|, |A_i|)
        x = policy.state_projection(i)
        n_rows, n_act = policy.theta[i].shape
        hits = np.zeros((n_rows, n_act))
        np.add.at(hits, x, per_state)
        return hits - policy.probs_table(i) * hits.sum(axis=1, keepdims=True)


def exact_occupancy(mdp: FactoredMDP, policy: LocalizedPolicy, horizon: int | None = None) -> OccupancyMeasure:
    return ExactEvaluator(mdp, policy).occupancy(horizon)


def exact_q(mdp: FactoredMDP, policy: LocalizedPolicy, reward_i: np.ndarray, i: int) -> np.ndarray:
    """Full ``(|S|, |A|)`` Q-function of agent ``i``'s local reward ``r_i(s_i, a_i)``."""
    rewards = [None] * mdp.n_agents
    rewards[i] = reward_i
    return ExactEvaluator(mdp, policy).q_functions(rewards)[i]


def exact_policy_gradient(mdp, policy, utilities) -> list[np.ndarray]:
    """Exact ``grad_theta_i F`` via shadow rewards and shadow Q-functions."""
    ev = ExactEvaluator(mdp, policy)
    occ, _, qs = ev.shadow_q(utilities)
    weights = occ.joint * np.mean(qs, axis=0)
    return [ev.aggregate_score(i, weights) for i in range(mdp.n_agents)]


def expected_truncated_gradient(
    mdp: FactoredMDP,
    policy: LocalizedPolicy,
    q_tables: dict[int, TruncatedQTable],
    horizon: int | None = None,
    evaluator: ExactEvaluator | None = None,
) -> list[np.ndarray]:
    """Expectation of the sampled truncated gradient for fixed Q tables.

    ``horizon=None`` gives the infinite-horizon expectation.
    """
    ev = evaluator or ExactEvaluator(mdp, policy)
    lam = ev.occupancy(horizon).joint
    kappa = next(iter(q_tables.values())).kappa
    hood = neighborhood(mdp.graph, kappa)
    full = {j: t.broadcast() for j, t in q_tables.items()}
    n = mdp.n_agents
    grads = []
    for i in range(n):
        qsum = sum(full[j] for j in hood[i]) / n
        grads.append(ev.aggregate_score(i, lam * qsum))
    return grads


def exact_truncated_gradient(mdp, policy, utilities, kappa: int, anchor=None) -> list[np.ndarray]:
    """Truncated gradient with exact, anchored shadow Q tables and exact expectation."""
    ev = ExactEvaluator(mdp, policy)
    _, _, qs = ev.shadow_q(utilities)
    tables = {j: exact_truncated_q(qs[j], mdp, j, kappa, anchor) for j in range(mdp.n_agents)}
    return expected_truncated_gradient(mdp, policy, tables, evaluator=ev)


def zero_expectation_residual(mdp, policy, utilities, kappa: int, anchor=None) -> np.ndarray:
    """Per agent, max over states of ``|| E_a[psi_i * sum_{j outside N_i} Qhat_j] ||``.

    Agents outside the neighborhood never read ``a_i``, so this is zero up
    to rounding.
    """
    ev = ExactEvaluator(mdp, policy)
    _, _, qs = ev.shadow_q(utilities)
    hood = neighborhood(mdp.graph, kappa)
    full = [exact_truncated_q(qs[j], mdp, j, kappa, anchor).broadcast() for j in range(mdp.n_agents)]
    out = np.zeros(mdp.n_agents)
    nS = mdp.states.size
    for i in range(mdp.n_agents):
        z = sum((full[j] for j in hood.complement[i]), np.zeros_like(full[0]))
        weighted = (ev.pi * z).reshape((nS,) + mdp.action_sizes)
        others = tuple(1 + ax for ax in range(mdp.n_agents) if ax != i)
        per_action = weighted.sum(axis=others)  # (|S|, |A_i|)
        pi_i = policy.probs_table(i)[policy.state_projection(i)]
        vec = per_action - pi_i * per_action.sum(axis=1, keepdims=True)
        out[i] = float(np.linalg.norm(vec, axis=1).max())
    return out


def finite_difference_gradient(mdp, policy, utilities, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the exact objective over every parameter."""
    base = policy.flat_params()
    grad = np.zeros_like(base)

    def objective(flat):
        occ = exact_occupancy(mdp, policy.from_flat(flat))
        return objective_from_occupancy(occ.local, utilities)

    for k in range(base.size):
        e = np.zeros_like(base)
        e[k] = h
        grad[k] = (objective(base + e) - objective(base - e)) / (2 * h)
    out, pos = [], 0
    for sh in policy.table_shapes:
        size = sh[0] * sh[1]
        out.append(grad[pos:pos + size].reshape(sh))
        pos += size
    return out


def advantage_policy_gradient(mdp, policy, rewards: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Classical policy gradient of ``V(r)`` with ``r = mean_i r_i``, advantage form.

    Uses the global reward directly (no shadow rewards) and
    ``sum_s d(s) sum_a pi(a|s) psi_i(a_i|s) (Q(s,a) - V(s))``.
    """
    nS, nA = mdp.states.size, mdp.actions.size
    P = mdp.global_transition()
    pi = policy.global_matrix()
    r = np.mean([broadcast_local(mdp, i, rewards[i]) for i in range(mdp.n_agents)], axis=0)
    P_pi = np.einsum("sa,sat->st", pi, P)
    V = np.linalg.solve(np.eye(nS) - mdp.gamma * P_pi, (pi * r).sum(axis=1))
    Q = r + mdp.gamma * P.reshape(nS * nA, nS).dot(V).reshape(nS, nA)
    adv = Q - V[:, None]
    d = np.linalg.solve((np.eye(nS) - mdp.gamma * P_pi).T, mdp.xi)
    grads = []
    for i in range(mdp.n_agents):
        g = np.zeros_like(policy.theta[i])
        x = policy.state_projection(i)
        a_local = mdp.actions.decode(np.arange(nA))[:, i]
        probs_i = policy.probs_table(i)
        for s in range(nS):
            for a in range(nA):
                w = d[s] * pi[s, a] * adv[s, a]
                g[x[s]] -= w * probs_i[x[s]]
                g[x[s], a_local[a]] += w
        grads.append(g)
    return grads


# --- spatial decay ---------------------------------------------------------


@dataclass(frozen=True)
class InfluenceMatrix:
    """``M[i, j]``: sup TV change of ``P_i`` when only ``(s_j, a_j)`` changes."""

    M: np.ndarray
    dist: np.ndarray


@dataclass(frozen=True)
class DecayCertificate:
    beta: float
    rho: float
    gamma: float
    M_f: float
    holds: bool
    c0: float
    phi0: float

    def bound(self, kappa) -> np.ndarray | float:
        """``c0 * phi0**kappa`` (infinite when the certificate fails)."""
        if not self.holds:
            return np.full(np.shape(kappa), np.inf) if np.ndim(kappa) else np.inf
        return self.c0 * self.phi0 ** np.asarray(kappa, dtype=float)


def influence_matrix(mdp: FactoredMDP, limits: OracleLimits = DEFAULT_LIMITS) -> InfluenceMatrix:
    if mdp.n_pairs > limits.max_kernel_rows:
        raise OracleError(f"{mdp.n_pairs} kernel rows exceed max_kernel_rows={limits.max_kernel_rows}")
    n = mdp.n_agents
    M = np.zeros((n, n))
    for i in range(n):
        tensor = mdp.local_kernel_tensor(i)
        for j in range(n):
            rest = [ax for ax in range(2 * n) if ax not in (j, n + j)]
            moved = np.transpose(tensor, [j, n + j] + rest + [2 * n])
            k = mdp.state_sizes[j] * mdp.action_sizes[j]
            rows = moved.reshape(k, -1, tensor.shape[-1])
            tv = 0.5 * np.abs(rows[:, None] - rows[None, :]).sum(-1)
            M[i, j] = tv.max()
    return InfluenceMatrix(M, np.asarray(mdp.graph.dist))


def certify_decay(M: InfluenceMatrix, beta: float, gamma: float, M_f: float) -> DecayCertificate:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    with np.errstate(over="ignore", invalid="ignore"):
        weights = np.where(M.M > 0, np.exp(beta * M.dist) * M.M, 0.0)
    rho = float(weights.sum(axis=1).max())
    holds = bool(gamma * rho < 1.0)
    c0 = 2 * gamma * rho * M_f / (1 - gamma * rho) if holds else np.inf
    return DecayCertificate(float(beta), rho, float(gamma), float(M_f), holds, float(c0), float(np.exp(-beta)))


def search_certificate(
    M: InfluenceMatrix,
    gamma: float,
    M_f: float,
    betas: Sequence[float] = BETA_GRID,
    kappa_ref: int = 1,
) -> DecayCertificate:
    """Best certificate on the ``beta`` grid, ranked by ``rho * exp(-beta * kappa_ref)``.

    Holding certificates are preferred; if none holds the best failing one
    is returned.
    """
    certs = [certify_decay(M, b, gamma, M_f) for b in betas]
    pool = [c for c in certs if c.holds] or certs
    return min(pool, key=lambda c: c.rho * np.exp(-c.beta * kappa_ref))


def _spread_by_neighborhood(mdp: FactoredMDP, q: np.ndarray, members: Sequence[int]) -> float:
    n = mdp.n_agents
    tensor = q.reshape(mdp.state_sizes + mdp.action_sizes)
    keep = list(members) + [n + j for j in members]
    rest = [ax for ax in range(2 * n) if ax not in keep]
    grouped = np.transpose(tensor, keep + rest).reshape(int(np.prod([tensor.shape[a] for a in keep])), -1)
    return float((grouped.max(axis=1) - grouped.min(axis=1)).max())


def measure_decay(mdp, policy, utilities, kappas: Sequence[int] | None = None) -> np.ndarray:
    """``table[i, k]``: sup of ``|Q_i(s,a) - Q_i(s',a')|`` over pairs agreeing on ``N_i^k``."""
    _, _, qs = ExactEvaluator(mdp, policy).shadow_q(utilities)
    kappas = range(mdp.graph.diameter + 1) if kappas is None else kappas
    table = np.zeros((mdp.n_agents, len(kappas)))
    for col, k in enumerate(kappas):
        hood = neighborhood(mdp.graph, k)
        for i in range(mdp.n_agents):
            table[i, col] = _spread_by_neighborhood(mdp, qs[i], hood[i])
    return table


def truncation_errors(mdp, policy, utilities, kappas: Sequence[int] | None = None, anchor=None) -> dict:
    """Per ``kappa``: sup ``|Qhat_i - Q_i|`` and ``||ghat_i - grad_i F||`` for every agent."""
    ev = ExactEvaluator(mdp, policy)
    occ, _, qs = ev.shadow_q(utilities)
    exact = [ev.aggregate_score(i, occ.joint * np.mean(qs, axis=0)) for i in range(mdp.n_agents)]
    kappas = range(mdp.graph.diameter + 1) if kappas is None else kappas
    q_err = np.zeros((mdp.n_agents, len(kappas)))
    g_err = np.zeros((mdp.n_agents, len(kappas)))
    for col, k in enumerate(kappas):
        tables = {j: exact_truncated_q(qs[j], mdp, j, k, anchor) for j in range(mdp.n_agents)}
        trunc = expected_truncated_gradient(mdp, policy, tables, evaluator=ev)
        for i in range(mdp.n_agents):
            q_err[i, col] = np.abs(tables[i].broadcast() - qs[i]).max()
            g_err[i, col] = np.linalg.norm(trunc[i] - exact[i])
    return {"kappas": list(kappas), "q_error": q_err, "gradient_error": g_err}


def truncation_gradient_bound(cert: DecayCertificate, kappa, score_bound: float = SCORE_NORM_BOUND):
    """``c0 phi0^kappa M_psi / (1 - gamma)``."""
    return cert.bound(kappa) * score_bound / (1.0 - cert.gamma)
