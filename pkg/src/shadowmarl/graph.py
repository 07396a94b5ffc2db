"""Agent communication graphs and radius-kappa neighborhoods."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

__all__ = [
    "AgentGraph",
    "NeighborhoodIndex",
    "build_graph",
    "neighborhood",
    "named_graph",
]


@dataclass(frozen=True)
class AgentGraph:
    """Undirected, unweighted agent graph.

    ``dist[i, j]`` is the hop count between agents; disconnected pairs hold
    ``np.inf``.
    """

    n: int
    edges: frozenset
    dist: np.ndarray = field(repr=False, compare=False)

    @property
    def diameter(self) -> int:
        """Largest finite pairwise distance."""
        finite = self.dist[np.isfinite(self.dist)]
        return int(finite.max()) if finite.size else 0

    @property
    def is_connected(self) -> bool:
        return bool(np.isfinite(self.dist).all())

    def neighbors(self, i: int) -> list[int]:
        return [j for j in range(self.n) if self.dist[i, j] == 1]


@dataclass(frozen=True)
class NeighborhoodIndex:
    kappa: int
    members: tuple[tuple[int, ...], ...]
    complement: tuple[tuple[int, ...], ...]

    def __getitem__(self, i: int) -> tuple[int, ...]:
        return self.members[i]

    def __len__(self) -> int:
        return len(self.members)

    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])


def build_graph(n: int, edges: Iterable[Sequence[int]]) -> AgentGraph:
    """Build an :class:`AgentGraph` from an explicit edge list.

    Raises ``ValueError`` on out-of-range indices, self-loops and duplicate
    edges (``(0, 1)`` and ``(1, 0)`` count as the same edge).
    """
    if n < 1:
        raise ValueError(f"need at least one agent, got n={n}")
    seen: set[tuple[int, int]] = set()
    for e in edges:
        if len(e) != 2:
            raise ValueError(f"edge must be a pair, got {e!r}")
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise ValueError(f"self-loop at agent {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValueError(f"duplicate edge {key}")
        seen.add(key)

    if seen:
        rows, cols = zip(*seen)
        adj = csr_matrix((np.ones(len(seen)), (rows, cols)), shape=(n, n))
    else:
        adj = csr_matrix((n, n))
    dist = shortest_path(adj, directed=False, unweighted=True)
    dist.setflags(write=False)
    return AgentGraph(n=n, edges=frozenset(seen), dist=dist)


def neighborhood(g: AgentGraph, kappa: int) -> NeighborhoodIndex:
    if kappa < 0:
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    members = []
    complement = []
    for i in range(g.n):
        inside = g.dist[i] <= kappa
        members.append(tuple(int(j) for j in np.flatnonzero(inside)))
        complement.append(tuple(int(j) for j in np.flatnonzero(~inside)))
    return NeighborhoodIndex(kappa=int(kappa), members=tuple(members), complement=tuple(complement))


def named_graph(name: str, size: int | Sequence[int]) -> AgentGraph:
    """Generate a ``line``, ``ring``, ``grid`` or ``complete`` graph.

    ``grid`` takes ``(rows, cols)``; the others take an agent count.
    """
    if name == "grid":
        rows, cols = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
        n = rows * cols
        edges = []
        for r in range(rows):
            for c in range(cols):
                k = r * cols + c
                if c + 1 < cols:
                    edges.append((k, k + 1))
                if r + 1 < rows:
                    edges.append((k, k + cols))
        return build_graph(n, edges)
    if not isinstance(size, (int, np.integer)):
        raise ValueError(f"graph {name!r} takes an integer size")
    n = int(size)
    if name == "line":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif name == "ring":
        if n < 3:
            edges = [(i, i + 1) for i in range(n - 1)]
        else:
            edges = [(i, (i + 1) % n) for i in range(n)]
    elif name == "complete":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        raise ValueError(f"unknown graph generator {name!r}")
    return build_graph(n, edges)
