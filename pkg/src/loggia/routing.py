"""Shortest-path action stage: link weights to next-hop forwarding rows.

Ties are broken lexicographically on (path cost, first-hop id), so the
same weights always yield the same rows.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .topology import Topology

METRICS = ("OSPF", "EIGRP", "RIP")


@dataclass
class RoutingAction:
    """``next_hop[u, z]`` is the neighbor ``u`` forwards to for destination ``z`` (-1 on the diagonal)."""

    next_hop: np.ndarray

    def row(self, u: int) -> np.ndarray:
        return self.next_hop[u]

    def rows(self) -> dict[int, np.ndarray]:
        return {u: self.next_hop[u] for u in range(len(self.next_hop))}

    def __eq__(self, other):
        return isinstance(other, RoutingAction) and np.array_equal(self.next_hop, other.next_hop)


def out_adjacency(topo: Topology, weights) -> list[list[tuple[int, float]]]:
    """Per-node outgoing (neighbor, weight) lists; ``weights`` is aligned with ``topo.edges``."""
    weights = np.asarray(weights, dtype=float)
    edges = topo.edges
    if weights.shape != (len(edges),):
        raise ValueError(f"expected {len(edges)} edge weights, got shape {weights.shape}")
    adj = [[] for _ in range(topo.num_nodes)]
    for (u, v), w in zip(edges, weights.tolist()):
        adj[u].append((v, w))
    return adj


def first_hops(adj, source: int) -> tuple[list[float], list[int]]:
    """Single-source Dijkstra with (cost, first hop) labels."""
    n = len(adj)
    inf = float("inf")
    dist = [inf] * n
    hop = [n] * n
    done = [False] * n
    dist[source], hop[source] = 0.0, -1
    heap = [(0.0, -1, source)]
    while heap:
        d, h, x = heapq.heappop(heap)
        if done[x]:
            continue
        done[x] = True
        for y, w in adj[x]:
            if done[y]:
                continue
            nd = d + w
            nh = y if x == source else h
            if nd < dist[y] or (nd == dist[y] and nh < hop[y]):
                dist[y], hop[y] = nd, nh
                heapq.heappush(heap, (nd, nh, y))
    return dist, hop


def _check_positive(weights) -> None:
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("link weights must be finite and strictly positive")


def to_action_local(topo: Topology, u: int, weights) -> np.ndarray:
    """Forwarding row of node ``u`` computed from its own view of the link weights."""
    _check_positive(weights)
    _, hop = first_hops(out_adjacency(topo, weights), u)
    return np.asarray(hop, dtype=np.int64)


def to_action_single(topo: Topology, weights) -> RoutingAction:
    """Full forwarding table, one Dijkstra run per source node."""
    _check_positive(weights)
    adj = out_adjacency(topo, weights)
    table = np.array([first_hops(adj, u)[1] for u in range(topo.num_nodes)], dtype=np.int64)
    return RoutingAction(table)


def sp_baseline(topo: Topology, metric: str) -> np.ndarray:
    """Static protocol link weights per directed edge.

    OSPF: reference bandwidth 1e8 bps over link bps. EIGRP: 1e7 / kbps plus
    delay in tens of microseconds (default K-values). RIP: hop count.
    """
    metric = metric.upper()
    out = []
    for u, v in topo.edges:
        rate, delay = topo.datarate(u, v), topo.delay(u, v)
        if metric == "OSPF":
            out.append(1e8 / (rate * 1e6))
        elif metric == "EIGRP":
            out.append(1e7 / (rate * 1e3) + delay * 1e3 / 10.0)
        elif metric == "RIP":
            out.append(1.0)
        else:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return np.asarray(out, dtype=float)


def follow(action: RoutingAction, u: int, z: int, max_hops: int | None = None) -> list[int] | None:
    """Path obtained by following static rows from u to z; None if it loops."""
    limit = max_hops if max_hops is not None else len(action.next_hop)
    path = [u]
    while path[-1] != z:
        if len(path) > limit:
            return None
        path.append(int(action.next_hop[path[-1], z]))
    return path


def link_delay_us(topo: Topology, u: int, v: int) -> int:
    return int(round(topo.delay(u, v) * 1000))


def delay_tree(topo: Topology, root: int) -> tuple[list[int], list[int]]:
    """Minimum-delay spanning tree rooted at ``root``: (delays in microseconds, parent ids).

    Equal-delay alternatives resolve to the lower parent id.
    """
    n = topo.num_nodes
    dist = [None] * n
    parent = [-1] * n
    best = {root: (0, -1)}
    heap = [(0, -1, root)]
    while heap:
        d, p, x = heapq.heappop(heap)
        if dist[x] is not None:
            continue
        dist[x], parent[x] = d, p
        for y in topo.neighbors(x):
            if dist[y] is not None:
                continue
            cand = (d + link_delay_us(topo, x, y), x)
            if y not in best or cand < best[y]:
                best[y] = cand
                heapq.heappush(heap, (cand[0], x, y))
    return dist, parent


def shortest_delays_us(topo: Topology) -> np.ndarray:
    """All-pairs minimum propagation delay in integer microseconds."""
    return np.array([delay_tree(topo, v)[0] for v in range(topo.num_nodes)], dtype=np.int64)
