"""Self-organizing field blocks over a communication graph.

These are the graph-wide building blocks the protocol composes each round:
leader election per connected component (min uid), a hop-count gradient field
rooted at the leaders, tree-based value collection toward each leader, and
broadcast of a leader's value back down its tree.  Each block is computed by
iterating a synchronous per-node update until nothing changes, which takes at
most (component diameter + 1) rounds; re-running an extra round is a no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

INFINITE = math.inf


@dataclass(frozen=True)
class FieldGraph:
    """Undirected graph over device uids; adjacency is symmetric, no self loops."""

    nodes: tuple[int, ...]
    adj: dict[int, tuple[int, ...]]

    def __post_init__(self) -> None:
        nodes = tuple(sorted(set(int(u) for u in self.nodes)))
        object.__setattr__(self, "nodes", nodes)
        node_set = set(nodes)
        adj = {u: tuple(sorted(set(self.adj.get(u, ())))) for u in nodes}
        object.__setattr__(self, "adj", adj)
        for u, nbrs in adj.items():
            for v in nbrs:
                if v == u:
                    raise ValueError(f"self loop at node {u}")
                if v not in node_set:
                    raise ValueError(f"edge {u}-{v} leaves the node set")
                if u not in adj[v]:
                    raise ValueError(f"asymmetric edge {u}-{v}")

    @staticmethod
    def from_edges(nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> "FieldGraph":
        adj: dict[int, list[int]] = {int(u): [] for u in nodes}
        for a, b in edges:
            a, b = int(a), int(b)
            if a not in adj or b not in adj:
                raise ValueError(f"edge {a}-{b} references an unknown node")
            adj[a].append(b)
            adj[b].append(a)
        return FieldGraph(tuple(adj), {u: tuple(v) for u, v in adj.items()})

    @staticmethod
    def from_topology(topology, keep_edge: Callable[[int, int], bool] | None = None) -> "FieldGraph":
        """Graph over all topology uids, optionally keeping only some edges."""
        edges = [
            (i, j)
            for i, j in topology.edges()
            if keep_edge is None or keep_edge(i, j)
        ]
        return FieldGraph.from_edges(range(topology.n), edges)

    def without_node(self, uid: int) -> "FieldGraph":
        if uid not in self.adj:
            raise ValueError(f"node {uid} not in graph")
        nodes = tuple(u for u in self.nodes if u != uid)
        adj = {u: tuple(v for v in self.adj[u] if v != uid) for u in nodes}
        return FieldGraph(nodes, adj)

    def edge_list(self) -> list[tuple[int, int]]:
        return [(u, v) for u in self.nodes for v in self.adj[u] if u < v]


@dataclass
class GradientField:
    """Hop distances from the nearest source, with parent links toward it.

    hops is INFINITE for nodes no source reaches; such nodes have no parent
    and no source.  A source has hop 0 and is its own source.
    """

    hops: dict[int, float]
    parent: dict[int, int | None]
    source: dict[int, int | None]


def min_flood(graph: FieldGraph) -> tuple[dict[int, int], int]:
    """Iterate "my candidate = min over closed neighborhood" to fixpoint.

    Returns the final candidate map and the number of synchronous rounds run,
    including the final confirming round that changes nothing.
    """
    cand = {u: u for u in graph.nodes}
    rounds = 0
    while True:
        rounds += 1
        new = {
            u: min(cand[u], *(cand[v] for v in graph.adj[u])) if graph.adj[u] else cand[u]
            for u in graph.nodes
        }
        if new == cand:
            return cand, rounds
        cand = new


def s_block(graph: FieldGraph) -> dict[int, bool]:
    """Leader flags: the minimum uid of each connected component leads it."""
    cand, _ = min_flood(graph)
    return {u: cand[u] == u for u in graph.nodes}


def bfs_hops(graph: FieldGraph, sources: Iterable[int]) -> tuple[dict[int, float], int]:
    """Synchronous hop-count relaxation from the sources to fixpoint.

    Returns hop distances (INFINITE where unreachable) and the number of
    rounds run, including the final confirming round.
    """
    src = set(int(s) for s in sources)
    unknown = src - set(graph.nodes)
    if unknown:
        raise ValueError(f"sources {sorted(unknown)} not in graph")
    hops = {u: 0.0 if u in src else INFINITE for u in graph.nodes}
    rounds = 0
    while True:
        rounds += 1
        new = {}
        for u in graph.nodes:
            best = hops[u]
            for v in graph.adj[u]:
                if hops[v] + 1 < best:
                    best = hops[v] + 1
            new[u] = best
        if new == hops:
            return hops, rounds
        hops = new


def g_block(graph: FieldGraph, sources: Iterable[int]) -> GradientField:
    """Hop field from the sources; parents choose the lowest-uid neighbor
    among those at minimal hop distance, and source is the parent chain's root."""
    src = set(int(s) for s in sources)
    hops, _ = bfs_hops(graph, src)
    parent: dict[int, int | None] = {}
    for u in graph.nodes:
        if u in src or hops[u] == INFINITE:
            parent[u] = None
            continue
        best = min(hops[v] for v in graph.adj[u])
        parent[u] = min(v for v in graph.adj[u] if hops[v] == best)
    source: dict[int, int | None] = {}
    for u in sorted(graph.nodes, key=lambda v: (hops[v], v)):
        if u in src:
            source[u] = u
        elif hops[u] == INFINITE:
            source[u] = None
        else:
            source[u] = source[parent[u]]
    return GradientField(hops, parent, source)


def c_block(
    field: GradientField,
    values: Mapping[int, Any],
    combine: Callable[[Any, Any], Any],
    identity: Any,
) -> dict[int, Any]:
    """Aggregate every reachable node's value up the tree to its source.

    combine must be associative and commutative with the given identity; a
    node missing from values contributes the identity.  At each node the own
    value is folded with the children's accumulations in ascending-uid order,
    which fixes the floating-point evaluation order.
    """
    children: dict[int, list[int]] = {u: [] for u in field.hops}
    for u, p in field.parent.items():
        if p is not None:
            children[p].append(u)
    acc: dict[int, Any] = {}
    reachable = [u for u in field.hops if field.hops[u] != INFINITE]
    for u in sorted(reachable, key=lambda v: (-field.hops[v], v)):
        value = values.get(u, identity)
        for c in sorted(children[u]):
            value = combine(value, acc[c])
        acc[u] = value
    return {u: acc[u] for u in reachable if field.source[u] == u}


def broadcast_block(field: GradientField, source_values: Mapping[int, Any]) -> dict[int, Any]:
    """Give every reachable node its source's value; unreachable nodes get none."""
    out = {}
    for u, s in field.source.items():
        if s is None:
            continue
        if s not in source_values:
            raise ValueError(f"missing value for source {s}")
        out[u] = source_values[s]
    return out


def stabilize_after_removal(
    graph: FieldGraph, removed_uid: int, sources: Iterable[int] | None = None
) -> tuple[dict[int, bool], GradientField]:
    """Recompute leaders and the hop field after one node disappears.

    The blocks restart from clean state on the residual graph, so the result
    matches a from-scratch computation and settles within (new diameter + 1)
    synchronous rounds.  When sources is None the new leaders root the field.
    """
    residual = graph.without_node(removed_uid)
    leaders = s_block(residual)
    if sources is None:
        src = [u for u, is_leader in leaders.items() if is_leader]
    else:
        src = [s for s in sources if s != removed_uid]
    return leaders, g_block(residual, src)
