"""Instance builders and independent closed-form oracles shared by the tests."""
from __future__ import annotations

import itertools

import numpy as np

from shadowmarl.graph import build_graph, named_graph
from shadowmarl.mdp import FactoredMDP, make_spatial_mdp, uniform_xi
from shadowmarl.policy import LocalizedPolicy
from shadowmarl.utility import DistanceUtility, EntropyUtility, LinearUtility

GRAPH_KINDS = ("line", "ring")


def random_instance(seed: int, n: int | None = None, gamma: float | None = None, kappa: int | None = None):
    """Random (mdp, policy, utilities) triple at desk scale."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4)) if n is None else n
    kind = GRAPH_KINDS[int(rng.integers(2))]
    graph = named_graph(kind, n)
    sizes_s = [int(x) for x in rng.integers(2, 4, size=n)]
    sizes_a = [int(x) for x in rng.integers(2, 4, size=n)]
    gamma = float(rng.choice([0.8, 0.9, 0.95])) if gamma is None else gamma
    strength = [1.0, float(rng.uniform(0.1, 0.5)), float(rng.uniform(0.0, 0.1))]
    mdp = make_spatial_mdp(graph, sizes_s, sizes_a, strength, gamma, seed=seed)
    kappa = int(rng.integers(0, graph.diameter + 1)) if kappa is None else kappa
    policy = LocalizedPolicy.for_mdp(mdp, kappa)
    policy = policy.from_flat(rng.normal(size=policy.flat_params().size))
    return mdp, policy, random_utilities(mdp, rng)


def random_utilities(mdp: FactoredMDP, rng: np.random.Generator, kinds=None):
    utils = []
    for i in range(mdp.n_agents):
        shape = (mdp.state_sizes[i], mdp.action_sizes[i])
        kind = kinds[i % len(kinds)] if kinds else ("linear", "entropy", "distance")[int(rng.integers(3))]
        if kind == "linear":
            utils.append(LinearUtility(rng.uniform(-1, 1, shape)))
        elif kind == "entropy":
            utils.append(EntropyUtility(mdp.gamma))
        else:
            target = rng.dirichlet(np.ones(shape[0] * shape[1])).reshape(shape) / (1 - mdp.gamma)
            utils.append(DistanceUtility(target))
    return utils


# Certified sweep set, fixed before looking at any measured outcome.
CERT_GRAPHS = (("line", 3), ("line", 4), ("ring", 4), ("ring", 5), ("line", 5))


def certified_instance(k: int):
    name, size = CERT_GRAPHS[k]
    gamma = 0.9
    mdp = make_spatial_mdp(named_graph(name, size), [2] * size, [2] * size, [1.0, 0.2, 0.04], gamma, seed=k)
    policy = LocalizedPolicy.for_mdp(mdp, 1, init="uniform", seed=k)
    rng = np.random.default_rng(k)
    utils = random_utilities(mdp, rng, kinds=("linear", "entropy", "distance"))
    return mdp, policy, utils


def decoupled_mdp(n: int, sizes_s, sizes_a, gamma: float, seed: int = 0) -> FactoredMDP:
    return make_spatial_mdp(named_graph("line", n), sizes_s, sizes_a, [1.0], gamma, seed=seed)


def single_agent_mdp(P: np.ndarray, gamma: float, xi=None) -> FactoredMDP:
    """One agent with kernel ``P[s, a, s']``."""
    P = np.asarray(P, dtype=float)
    xi = uniform_xi([P.shape[0]]) if xi is None else np.asarray(xi, dtype=float)
    return FactoredMDP(build_graph(1, []), (P.shape[0],), (P.shape[1],), (P,), xi, gamma)


# 2-state Markov reward process used for the TD benchmark.
MRP_P = np.array([[0.7, 0.3], [0.4, 0.6]])
MRP_R = np.array([1.0, 0.0])
MRP_GAMMA = 0.8


def mrp_closed_form(P=MRP_P, r=MRP_R, gamma=MRP_GAMMA) -> np.ndarray:
    """``V = (I - gamma P)^{-1} r`` for a 2x2 chain by Cramer's rule."""
    a, b = 1 - gamma * P[0, 0], -gamma * P[0, 1]
    c, d = -gamma * P[1, 0], 1 - gamma * P[1, 1]
    det = a * d - b * c
    return np.array([(d * r[0] - b * r[1]) / det, (a * r[1] - c * r[0]) / det])


def mrp_mdp() -> FactoredMDP:
    return single_agent_mdp(MRP_P[:, None, :], MRP_GAMMA)


def brute_force_occupancy(mdp: FactoredMDP, policy: LocalizedPolicy, horizon: int = 2000) -> np.ndarray:
    """Discounted visitation by forward iteration, independent of the linear solve."""
    P = mdp.global_transition()
    pi = policy.global_matrix()
    d = mdp.xi.copy()
    total = np.zeros_like(pi)
    for k in range(horizon):
        sa = d[:, None] * pi
        total += mdp.gamma ** k * sa
        d = np.einsum("sa,sat->t", sa, P)
    return total


def bfs_distances(n: int, edges) -> np.ndarray:
    adj = {i: set() for i in range(n)}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    dist = np.full((n, n), np.inf)
    for src in range(n):
        dist[src, src] = 0
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if dist[src, v] == np.inf:
                        dist[src, v] = dist[src, u] + 1
                        nxt.append(v)
            frontier = nxt
    return dist


def all_tuples(sizes):
    return list(itertools.product(*[range(s) for s in sizes]))


# Filled by the acceptance tests, printed by the terminal summary hook.
ACCEPTANCE_RESULTS: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
