"""Localized tabular softmax policies.

Agent ``i`` holds a logit table ``theta[i]`` of shape ``(|S_Ni|, |A_i|)``,
where rows enumerate joint states of the radius-``kappa`` neighborhood
``N_i`` (agents in ascending order, C-order flattening) and columns are
agent ``i``'s local actions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import softmax

from .graph import AgentGraph, NeighborhoodIndex, neighborhood
from .mdp import FactoredMDP, GlobalIndexer

__all__ = [
    "LocalizedPolicy",
    "SCORE_NORM_BOUND",
    "truncate_policy",
    "policy_locality_gap",
    "make_decaying_policy",
    "save_policy",
    "load_policy",
]

# sup of ||e_b - pi(.|x)||_2 over the simplex
SCORE_NORM_BOUND = float(np.sqrt(2.0))

CHECKPOINT_FORMAT = "shadowmarl.policy/v1"


@dataclass(frozen=True, eq=False)
class _Layout:
    graph: AgentGraph
    state_sizes: tuple[int, ...]
    action_sizes: tuple[int, ...]
    hood: NeighborhoodIndex
    projections: tuple[np.ndarray, ...]

    @classmethod
    def build(cls, graph, state_sizes, action_sizes, kappa):
        hood = neighborhood(graph, kappa)
        states = GlobalIndexer(state_sizes)
        proj = []
        for i in range(graph.n):
            p = states.projection_table(hood[i])
            p.setflags(write=False)
            proj.append(p)
        return cls(graph, tuple(state_sizes), tuple(action_sizes), hood, tuple(proj))


class LocalizedPolicy:
    """Product policy ``pi(a|s) = prod_i pi_i(a_i | s_Ni)`` with softmax factors."""

    def __init__(
        self,
        graph: AgentGraph,
        state_sizes: Sequence[int],
        action_sizes: Sequence[int],
        kappa: int,
        theta: Sequence[np.ndarray] | None = None,
        *,
        _layout: _Layout | None = None,
    ):
        self._layout = _layout or _Layout.build(
            graph, tuple(int(x) for x in state_sizes), tuple(int(x) for x in action_sizes), int(kappa)
        )
        shapes = self.table_shapes
        if theta is None:
            theta = [np.zeros(sh) for sh in shapes]
        theta = [np.array(t, dtype=float) for t in theta]
        for i, (t, sh) in enumerate(zip(theta, shapes)):
            if t.shape != sh:
                raise ValueError(f"theta[{i}] has shape {t.shape}, expected {sh}")
        if len(theta) != graph.n:
            raise ValueError(f"expected {graph.n} parameter tables, got {len(theta)}")
        self.theta = theta

    @classmethod
    def for_mdp(cls, mdp: FactoredMDP, kappa: int, init: str = "zeros", seed: int | None = None):
        """Policy over ``mdp``'s spaces; ``init`` is ``"zeros"`` or ``"uniform"`` (U[-0.1, 0.1])."""
        policy = cls(mdp.graph, mdp.state_sizes, mdp.action_sizes, kappa)
        if init == "uniform":
            rng = np.random.default_rng(seed)
            policy.theta = [rng.uniform(-0.1, 0.1, size=t.shape) for t in policy.theta]
        elif init != "zeros":
            raise ValueError(f"unknown init {init!r}")
        return policy

    # layout -------------------------------------------------------------
    @property
    def graph(self) -> AgentGraph:
        return self._layout.graph

    @property
    def kappa(self) -> int:
        return self._layout.hood.kappa

    @property
    def hood(self) -> NeighborhoodIndex:
        return self._layout.hood

    @property
    def n_agents(self) -> int:
        return self.graph.n

    @property
    def state_sizes(self) -> tuple[int, ...]:
        return self._layout.state_sizes

    @property
    def action_sizes(self) -> tuple[int, ...]:
        return self._layout.action_sizes

    @property
    def table_shapes(self) -> list[tuple[int, int]]:
        ss = self.state_sizes
        return [
            (int(np.prod([ss[j] for j in self.hood[i]])), self.action_sizes[i])
            for i in range(self.n_agents)
        ]

    def state_projection(self, i: int) -> np.ndarray:
        """Row of ``theta[i]`` used at each flat global state."""
        return self._layout.projections[i]

    def local_state(self, i: int, s) -> int:
        return int(self.state_projection(i)[GlobalIndexer(self.state_sizes).encode(s)])

    def compatible_with(self, mdp: FactoredMDP) -> bool:
        return (
            self.state_sizes == mdp.state_sizes
            and self.action_sizes == mdp.action_sizes
            and np.array_equal(self.graph.dist, mdp.graph.dist)
        )

    # probabilities ------------------------------------------------------
    def probs_table(self, i: int) -> np.ndarray:
        return softmax(self.theta[i], axis=1)

    def action_probs(self, i: int, s) -> np.ndarray:
        return self.probs_table(i)[self.local_state(i, s)]

    def log_prob(self, i: int, s, a_i: int) -> float:
        row = self.theta[i][self.local_state(i, s)]
        m = row.max()
        return float(row[a_i] - m - np.log(np.exp(row - m).sum()))

    def score(self, i: int, s, a_i: int) -> np.ndarray:
        """Gradient of ``log pi_i(a_i | s_Ni)`` w.r.t. ``theta[i]``."""
        x = self.local_state(i, s)
        out = np.zeros_like(self.theta[i])
        out[x] = -self.probs_table(i)[x]
        out[x, a_i] += 1.0
        return out

    def global_matrix(self) -> np.ndarray:
        """Dense ``(|S|, |A|)`` matrix of joint action probabilities."""
        nS = int(np.prod(self.state_sizes))
        out = np.ones((nS, 1))
        for i in range(self.n_agents):
            local = self.probs_table(i)[self.state_projection(i)]
            out = (out[:, :, None] * local[:, None, :]).reshape(nS, -1)
        return out

    # parameters ---------------------------------------------------------
    def with_theta(self, theta: Sequence[np.ndarray]) -> "LocalizedPolicy":
        return LocalizedPolicy(self.graph, self.state_sizes, self.action_sizes, self.kappa, theta, _layout=self._layout)

    def copy(self) -> "LocalizedPolicy":
        return self.with_theta([t.copy() for t in self.theta])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.theta])

    def from_flat(self, flat: np.ndarray) -> "LocalizedPolicy":
        flat = np.asarray(flat, dtype=float)
        out, pos = [], 0
        for sh in self.table_shapes:
            size = sh[0] * sh[1]
            out.append(flat[pos:pos + size].reshape(sh))
            pos += size
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return self.with_theta(out)

    def ascent_step(self, grads: Sequence[np.ndarray], eta: float) -> "LocalizedPolicy":
        return self.with_theta([t + eta * g for t, g in zip(self.theta, grads)])


def truncate_policy(p_full: LocalizedPolicy, kappa: int, anchor=None) -> LocalizedPolicy:
    """Radius-``kappa`` policy that freezes coordinates outside ``N_i^kappa`` at ``anchor``.

    The result agrees with ``p_full`` whenever the frozen coordinates equal
    the anchor state (all zeros by default).
    """
    if kappa > p_full.kappa:
        raise ValueError(f"cannot truncate radius {p_full.kappa} policy to larger radius {kappa}")
    n = p_full.n_agents
    anchor = np.zeros(n, dtype=np.int64) if anchor is None else np.asarray(anchor, dtype=np.int64)
    small = LocalizedPolicy(p_full.graph, p_full.state_sizes, p_full.action_sizes, kappa)
    theta = []
    for i in range(n):
        big_members = p_full.hood[i]
        small_members = small.hood[i]
        small_idx = GlobalIndexer([p_full.state_sizes[j] for j in small_members])
        big_idx = GlobalIndexer([p_full.state_sizes[j] for j in big_members])
        coords = small_idx.decode(np.arange(small_idx.size))
        full = np.tile(anchor[list(big_members)], (small_idx.size, 1))
        pos = [big_members.index(j) for j in small_members]
        full[:, pos] = coords
        theta.append(p_full.theta[i][big_idx.encode(full)].copy())
    return small.with_theta(theta)


def policy_locality_gap(policy: LocalizedPolicy, kappa: int) -> np.ndarray:
    """Per agent, sup TV between ``pi_i(.|s)`` and ``pi_i(.|s')`` over ``s, s'`` agreeing on ``N_i^kappa``."""
    sizes = policy.state_sizes
    n = policy.n_agents
    inner = neighborhood(policy.graph, kappa)
    gaps = np.zeros(n)
    for i in range(n):
        probs = policy.probs_table(i)[policy.state_projection(i)].reshape(sizes + (-1,))
        keep = list(inner[i])
        rest = [j for j in range(n) if j not in keep]
        grouped = np.transpose(probs, keep + rest + [n]).reshape(
            int(np.prod([sizes[j] for j in keep])), -1, probs.shape[-1]
        )
        tv = 0.5 * np.abs(grouped[:, :, None, :] - grouped[:, None, :, :]).sum(-1)
        gaps[i] = tv.max()
    return gaps


def make_decaying_policy(
    graph: AgentGraph,
    state_sizes: Sequence[int],
    action_sizes: Sequence[int],
    decay: float,
    scale: float = 1.0,
    seed: int = 0,
) -> LocalizedPolicy:
    """Full-observation policy whose logits weight agent ``j`` by ``decay**d(i,j)``.

    Radius is the graph diameter, so every ``pi_i`` sees the global state.
    Component tables are U[-1, 1], so changing agent ``j`` moves any logit
    by at most ``2 * scale * decay**d(i,j)``.
    """
    rng = np.random.default_rng(seed)
    pol = LocalizedPolicy(graph, state_sizes, action_sizes, graph.diameter)
    theta = []
    for i in range(graph.n):
        members = pol.hood[i]
        idx = GlobalIndexer([state_sizes[j] for j in members])
        coords = idx.decode(np.arange(idx.size))
        logits = np.zeros((idx.size, action_sizes[i]))
        for col, j in enumerate(members):
            w = scale * decay ** graph.dist[i, j]
            table = rng.uniform(-1.0, 1.0, size=(state_sizes[j], action_sizes[i]))
            logits += w * table[coords[:, col]]
        theta.append(logits)
    return pol.with_theta(theta)


def save_policy(policy: LocalizedPolicy, path: str | Path) -> None:
    """Write a JSON checkpoint.

    Each agent entry stores its neighborhood, the table shape and the values
    flattened row-major: neighborhood state tuple (ascending agent order,
    agent with the smallest id most significant) first, then local action.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kappa": policy.kappa,
        "n_agents": policy.n_agents,
        "edges": sorted([list(e) for e in policy.graph.edges]),
        "state_sizes": list(policy.state_sizes),
        "action_sizes": list(policy.action_sizes),
        "index_order": "row = C-order flat index of (s_j for j in neighborhood, ascending j); column = local action",
        "agents": [
            {
                "agent": i,
                "neighborhood": list(policy.hood[i]),
                "shape": list(policy.theta[i].shape),
                "values": policy.theta[i].ravel().tolist(),
            }
            for i in range(policy.n_agents)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_policy(path: str | Path) -> LocalizedPolicy:
    from .graph import build_graph

    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format {doc.get('format')!r}")
    graph = build_graph(doc["n_agents"], [tuple(e) for e in doc["edges"]])
    theta = [np.array(a["values"], dtype=float).reshape(a["shape"]) for a in doc["agents"]]
    return LocalizedPolicy(graph, doc["state_sizes"], doc["action_sizes"], doc["kappa"], theta)
