"""Factored networked MDPs: local kernels, the spatial generator, sampling.

Global states and actions are flattened in C order over agents, so agent 0
is the most significant coordinate. The same convention is used for every
agent subset (always taken in ascending agent order).
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

from .graph import AgentGraph

if TYPE_CHECKING:
    from .policy import LocalizedPolicy

__all__ = [
    "GlobalIndexer",
    "FactoredMDP",
    "Trajectory",
    "Batch",
    "make_spatial_mdp",
    "make_drift_mdp",
    "step",
    "sample_batch",
    "sample_path",
    "trajectory_rng",
]

ROW_TOL = 1e-12


class GlobalIndexer:
    """Mixed-radix map between coordinate tuples and flat indices."""

    def __init__(self, sizes: Sequence[int]):
        self.sizes = tuple(int(s) for s in sizes)
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"all sizes must be positive, got {self.sizes}")
        self.size = int(np.prod(self.sizes, dtype=np.int64)) if self.sizes else 1
        strides = []
        acc = 1
        for s in reversed(self.sizes):
            strides.append(acc)
            acc *= s
        self.strides = np.array(strides[::-1], dtype=np.int64)

    def __len__(self) -> int:
        return self.size

    def encode(self, coords) -> np.ndarray | int:
        coords = np.asarray(coords, dtype=np.int64)
        flat = coords @ self.strides
        return int(flat) if np.ndim(flat) == 0 else flat

    def decode(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        return (flat[..., None] // self.strides) % np.array(self.sizes, dtype=np.int64)

    def sub(self, agents: Sequence[int]) -> "GlobalIndexer":
        return GlobalIndexer([self.sizes[j] for j in agents])

    def project(self, flat, agents: Sequence[int]) -> np.ndarray | int:
        """Flat index of the sub-tuple over ``agents`` for each global flat index."""
        coords = self.decode(flat)[..., list(agents)]
        return self.sub(agents).encode(coords)

    def projection_table(self, agents: Sequence[int]) -> np.ndarray:
        return np.asarray(self.project(np.arange(self.size), agents), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class FactoredMDP:
    """Networked MDP with product transitions ``P(s'|s,a) = prod_i P_i(s_i'|s,a)``.

    ``kernels[i]`` has shape ``(|S|, |A|, |S_i|)`` over flat global state and
    action indices.
    """

    graph: AgentGraph
    state_sizes: tuple[int, ...]
    action_sizes: tuple[int, ...]
    kernels: tuple[np.ndarray, ...] = field(repr=False)
    xi: np.ndarray = field(repr=False)
    gamma: float

    def __post_init__(self):
        n = self.graph.n
        object.__setattr__(self, "state_sizes", tuple(int(x) for x in self.state_sizes))
        object.__setattr__(self, "action_sizes", tuple(int(x) for x in self.action_sizes))
        if len(self.state_sizes) != n or len(self.action_sizes) != n:
            raise ValueError("state_sizes and action_sizes need one entry per agent")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        nS, nA = self.states.size, self.actions.size
        kernels = []
        for i, k in enumerate(self.kernels):
            k = np.ascontiguousarray(k, dtype=float)
            if k.shape != (nS, nA, self.state_sizes[i]):
                raise ValueError(
                    f"kernel {i} has shape {k.shape}, expected {(nS, nA, self.state_sizes[i])}"
                )
            if (k < 0).any() or np.abs(k.sum(axis=-1) - 1.0).max() > ROW_TOL:
                raise ValueError(f"kernel {i} rows are not probability distributions")
            k.setflags(write=False)
            kernels.append(k)
        if len(kernels) != n:
            raise ValueError(f"expected {n} kernels, got {len(kernels)}")
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (nS,) or (xi < 0).any() or abs(xi.sum() - 1.0) > ROW_TOL:
            raise ValueError("xi must be a distribution over the global state space")
        xi.setflags(write=False)
        object.__setattr__(self, "kernels", tuple(kernels))
        object.__setattr__(self, "xi", xi)

    @property
    def n_agents(self) -> int:
        return self.graph.n

    @cached_property
    def states(self) -> GlobalIndexer:
        return GlobalIndexer(self.state_sizes)

    @cached_property
    def actions(self) -> GlobalIndexer:
        return GlobalIndexer(self.action_sizes)

    @property
    def n_pairs(self) -> int:
        return self.states.size * self.actions.size

    def local_kernel_tensor(self, i: int) -> np.ndarray:
        """Kernel ``i`` reshaped to ``(S_1..S_n, A_1..A_n, S_i)``."""
        return self.kernels[i].reshape(self.state_sizes + self.action_sizes + (self.state_sizes[i],))

    def global_transition(self) -> np.ndarray:
        """Dense ``(|S|, |A|, |S|)`` product kernel."""
        nS, nA = self.states.size, self.actions.size
        out = np.ones((nS * nA, 1))
        for k in self.kernels:
            out = (out[:, :, None] * k.reshape(nS * nA, 1, -1)).reshape(nS * nA, -1)
        return out.reshape(nS, nA, nS)

    @cached_property
    def _kernel_cumsum(self) -> list[list[list[float]]]:
        return [np.cumsum(k.reshape(-1, k.shape[-1]), axis=1).tolist() for k in self.kernels]


def uniform_xi(state_sizes: Sequence[int]) -> np.ndarray:
    nS = int(np.prod(state_sizes))
    return np.full(nS, 1.0 / nS)


def make_spatial_mdp(
    graph: AgentGraph,
    state_sizes: Sequence[int],
    action_sizes: Sequence[int],
    interaction_strength: Sequence[float],
    gamma: float,
    seed: int = 0,
    xi: np.ndarray | None = None,
    concentration: float = 1.0,
) -> FactoredMDP:
    """Random MDP whose agent-``j`` influence on agent ``i`` scales with distance.

    Each local kernel is a mixture
    ``P_i(.|s,a) = sum_j w_ij K_ij(.|s_j,a_j) / sum_j w_ij`` with
    ``w_ij = interaction_strength[d(i,j)]`` (zero past the end of the list)
    and Dirichlet(``concentration``) component tables ``K_ij``. Hence
    ``M[i, j] <= w_ij / sum_k w_ik``.
    """
    strength = np.asarray(interaction_strength, dtype=float)
    if strength.ndim != 1 or (strength < 0).any():
        raise ValueError("interaction_strength must be a non-negative vector")
    n = graph.n
    state_sizes = tuple(int(x) for x in state_sizes)
    action_sizes = tuple(int(x) for x in action_sizes)
    rng = np.random.default_rng(seed)
    nS = int(np.prod(state_sizes))
    nA = int(np.prod(action_sizes))
    kernels = []
    for i in range(n):
        total = np.zeros(state_sizes + action_sizes + (state_sizes[i],))
        weight_sum = 0.0
        for j in range(n):
            d = graph.dist[i, j]
            if not np.isfinite(d) or d >= len(strength) or strength[int(d)] == 0.0:
                continue
            w = float(strength[int(d)])
            comp = rng.dirichlet(np.full(state_sizes[i], concentration), size=(state_sizes[j], action_sizes[j]))
            shape = [1] * (2 * n) + [state_sizes[i]]
            shape[j] = state_sizes[j]
            shape[n + j] = action_sizes[j]
            total = total + w * comp.reshape(shape)
            weight_sum += w
        if weight_sum <= 0.0:
            raise ValueError(f"kernel rows for agent {i} cannot be normalized: all weights are zero")
        kernel = (total / weight_sum).reshape(nS, nA, state_sizes[i])
        kernel /= kernel.sum(axis=-1, keepdims=True)
        kernels.append(kernel)
    if xi is None:
        xi = uniform_xi(state_sizes)
    return FactoredMDP(graph, state_sizes, action_sizes, tuple(kernels), xi, float(gamma))


def make_drift_mdp(
    graph: AgentGraph,
    gamma: float,
    base: float = 0.02,
    push: float = 0.5,
    coupling: float = 0.1,
    n_actions: int = 2,
    xi: np.ndarray | None = None,
) -> FactoredMDP:
    """Binary-state instance where one action drives an agent toward state 1.

    ``P_i(s_i'=1 | s, a) = base + push * [a_i = n_actions - 1] + coupling * mean_{j~i} s_j``.
    For the defaults the uniform policy keeps agents in state 1 only about a
    third of the time, so entropy-type utilities have a clear ascent direction.
    """
    if n_actions < 2:
        raise ValueError("need at least two actions")
    if min(base, push, coupling) < 0 or base + push + coupling > 1:
        raise ValueError("base, push and coupling must be non-negative with sum at most 1")
    n = graph.n
    states = GlobalIndexer((2,) * n)
    actions = GlobalIndexer((n_actions,) * n)
    s_tab = states.decode(np.arange(states.size))
    a_tab = actions.decode(np.arange(actions.size))
    kernels = []
    for i in range(n):
        nbrs = list(graph.neighbors(i))
        pull = s_tab[:, nbrs].mean(axis=1) if nbrs else np.zeros(states.size)
        p1 = base + coupling * pull[:, None] + push * (a_tab[None, :, i] == n_actions - 1)
        kernels.append(np.stack([1.0 - p1, p1], axis=-1))
    if xi is None:
        xi = uniform_xi((2,) * n)
    return FactoredMDP(graph, (2,) * n, (n_actions,) * n, tuple(kernels), xi, float(gamma))


def trajectory_rng(seed: int, iteration: int = 0, index: int = 0) -> np.random.Generator:
    """Philox substream keyed by ``(seed, iteration, index)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(iteration), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def step(mdp: FactoredMDP, s, a, rng: np.random.Generator) -> np.ndarray:
    """Draw the next global state, one independent draw per agent."""
    s_flat = mdp.states.encode(s)
    a_flat = mdp.actions.encode(a)
    nxt = np.empty(mdp.n_agents, dtype=np.int64)
    for i, k in enumerate(mdp.kernels):
        nxt[i] = rng.choice(k.shape[-1], p=k[s_flat, a_flat])
    return nxt


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(tuple(s), tuple(a)) for s, a in zip(self.states.tolist(), self.actions.tolist())]


@dataclass(frozen=True)
class Batch:
    """``B`` trajectories of length ``H``; arrays shaped ``(B, H, n)``."""

    states: np.ndarray
    actions: np.ndarray
    state_index: np.ndarray
    action_index: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def __getitem__(self, b: int) -> Trajectory:
        return Trajectory(self.states[b], self.actions[b])

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[b] for b in range(len(self)))


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cum).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_batch(
    mdp: FactoredMDP,
    policy: "LocalizedPolicy",
    B: int,
    H: int,
    seed: int,
    iteration: int = 0,
) -> Batch:
    """Sample ``B`` trajectories of length ``H`` starting from ``xi``.

    Trajectory ``b`` consumes only its own substream
    ``trajectory_rng(seed, iteration, b)``, so the batch does not depend on
    evaluation order.
    """
    if B < 1 or H < 1:
        raise ValueError("B and H must be at least 1")
    n = mdp.n_agents
    per_traj = 1 + 2 * n * H
    u = np.stack([trajectory_rng(seed, iteration, b).random(per_traj) for b in range(B)])
    u0 = u[:, 0]
    u_steps = u[:, 1:].reshape(B, H, 2, n)

    states = np.empty((B, H, n), dtype=np.int64)
    actions = np.empty((B, H, n), dtype=np.int64)
    s_idx = np.empty((B, H), dtype=np.int64)
    a_idx = np.empty((B, H), dtype=np.int64)

    cur = np.minimum(np.searchsorted(np.cumsum(mdp.xi), u0, side="right"), mdp.states.size - 1)
    tables = [policy.probs_table(i) for i in range(n)]
    proj = [policy.state_projection(i) for i in range(n)]
    for k in range(H):
        s_idx[:, k] = cur
        states[:, k] = mdp.states.decode(cur)
        for i in range(n):
            actions[:, k, i] = _categorical(tables[i][proj[i][cur]], u_steps[:, k, 0, i])
        a_idx[:, k] = mdp.actions.encode(actions[:, k])
        if k + 1 < H:
            nxt = np.empty((B, n), dtype=np.int64)
            for i in range(n):
                nxt[:, i] = _categorical(mdp.kernels[i][cur, a_idx[:, k]], u_steps[:, k, 1, i])
            cur = mdp.states.encode(nxt)
    return Batch(states, actions, s_idx, a_idx)


def sample_path(
    mdp: FactoredMDP,
    policy: "LocalizedPolicy",
    length: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One long trajectory as flat ``(state_index, action_index)`` arrays.

    Sequential counterpart of :func:`sample_batch` for TD learning, where
    ``length`` is large and the batch dimension is one.
    """
    n = mdp.n_agents
    u = rng.random((length, 2, n)).tolist()
    u0 = rng.random()
    s_strides = mdp.states.strides.tolist()
    a_strides = mdp.actions.strides.tolist()
    nA = mdp.actions.size
    pol_cum = [np.cumsum(policy.probs_table(i), axis=1).tolist() for i in range(n)]
    proj = [policy.state_projection(i).tolist() for i in range(n)]
    ker_cum = mdp._kernel_cumsum
    a_last = [sz - 1 for sz in mdp.action_sizes]
    s_last = [sz - 1 for sz in mdp.state_sizes]

    s = min(bisect_right(np.cumsum(mdp.xi).tolist(), u0), mdp.states.size - 1)
    s_out = [0] * length
    a_out = [0] * length
    for k in range(length):
        uk = u[k]
        a = 0
        for i in range(n):
            ai = bisect_right(pol_cum[i][proj[i][s]], uk[0][i])
            a += (ai if ai < a_last[i] else a_last[i]) * a_strides[i]
        s_out[k] = s
        a_out[k] = a
        row = s * nA + a
        nxt = 0
        for i in range(n):
            si = bisect_right(ker_cum[i][row], uk[1][i])
            nxt += (si if si < s_last[i] else s_last[i]) * s_strides[i]
        s = nxt
    return np.array(s_out, dtype=np.int64), np.array(a_out, dtype=np.int64)
