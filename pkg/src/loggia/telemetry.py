"""Per-step node/edge snapshots and delay-aware observation graph assembly.

Remote state reaches an observer along minimum-delay paths, so observer
``v`` sees node ``u`` through the newest snapshot taken at least
``kappa*(v, u)`` before the current instant. Outgoing edge state is local
to the edge's source node, incoming edge state to its target.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace

import numpy as np

from .netsim import StepTrace
from .routing import delay_tree, shortest_delays_us
from .topology import Topology

BIRDSEYE = -1
MB = 1e6

NODE_FEATURES = ("is_self", "stale", "age", "tx_mb", "rx_mb", "drop_mb", "discard_mb", "degree")
EDGE_FEATURES = ("datarate", "delay", "queue_frac", "queue_load", "tx_mb", "drop_mb", "rx_mb", "stale")
GLOBAL_FEATURES = ("num_nodes", "num_edges", "tx_mb", "rx_mb", "drop_mb", "mean_queue_frac")
FEATURE_LAYOUT_VERSION = 1


def shortest_delay(topo: Topology, v: int, u: int) -> float:
    """Minimum cumulative link delay between ``v`` and ``u`` in ms."""
    return delay_tree(topo, v)[0][u] / 1000.0


def central_node(topo: Topology) -> int:
    """Node with the smallest maximum shortest-path delay; ties go to the lowest id."""
    kappa = shortest_delays_us(topo)
    return int(np.argmin(kappa.max(axis=1)))


def spanning_tree(topo: Topology, root: int) -> list[int]:
    """Parent of each node in the minimum-delay spanning tree rooted at ``root`` (-1 for the root)."""
    return delay_tree(topo, root)[1]


def payload_size(mode: str, num_nodes: int, num_neighbors: int, n: int = 0) -> int:
    """Serialized NodeSnapshot size in bytes (full maps or compact aggregates)."""
    if min(num_nodes, num_neighbors, n) < 0:
        raise ValueError("payload_size arguments must be nonnegative")
    if mode == "full":
        return 32 * num_nodes ** 2 + 62 * num_neighbors + 232 * n + 4
    if mode == "compact":
        return 62 * num_neighbors + 268
    raise ValueError(f"unknown payload mode {mode!r}")


@dataclass
class OutgoingEdgeSnapshot:
    target: int
    queue_bytes: int
    queue_fraction: float
    queue_load: float  # time-averaged occupancy fraction over the step
    drop_bytes: int
    tx_bytes: int
    datarate_mbps: float
    delay_ms: float


@dataclass
class IncomingEdgeSnapshot:
    source: int
    rx_bytes: int


@dataclass
class NodeSnapshot:
    node: int
    timestamp_us: int
    tx_by_dst: np.ndarray
    rx_by_src: np.ndarray
    dropped_bytes: int
    discarded_bytes: int
    outgoing: dict = field(default_factory=dict)
    incoming: dict = field(default_factory=dict)

    @property
    def timestamp_ms(self) -> float:
        return self.timestamp_us / 1000.0

    def payload_size(self, mode: str = "compact", n: int = 0) -> int:
        return payload_size(mode, len(self.tx_by_dst), len(self.outgoing), n)


class SnapshotStore:
    """Append-only map (node, timestamp) -> NodeSnapshot."""

    def __init__(self, num_nodes: int):
        self._times = [[] for _ in range(num_nodes)]
        self._snaps = [[] for _ in range(num_nodes)]

    def add(self, snap: NodeSnapshot) -> None:
        times = self._times[snap.node]
        if times and snap.timestamp_us <= times[-1]:
            raise ValueError(f"node {snap.node}: timestamp {snap.timestamp_us} not after {times[-1]}")
        times.append(snap.timestamp_us)
        self._snaps[snap.node].append(snap)

    def latest(self, node: int, not_after_us: int) -> NodeSnapshot | None:
        """Newest snapshot of ``node`` with timestamp <= ``not_after_us``."""
        i = bisect.bisect_right(self._times[node], not_after_us)
        return self._snaps[node][i - 1] if i else None

    def count(self, node: int | None = None) -> int:
        if node is None:
            return sum(len(t) for t in self._times)
        return len(self._times[node])

    def at(self, timestamp_us: int) -> list[NodeSnapshot]:
        out = []
        for node, times in enumerate(self._times):
            i = bisect.bisect_left(times, timestamp_us)
            if i < len(times) and times[i] == timestamp_us:
                out.append(self._snaps[node][i])
        return out


@dataclass
class ObservationGraph:
    num_nodes: int
    senders: np.ndarray
    receivers: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    global_features: np.ndarray
    observer_id: int
    agent_id: int = -1
    time_us: int = 0
    node_timestamps: np.ndarray | None = None  # -1 where no snapshot qualified

    @property
    def num_edges(self) -> int:
        return len(self.senders)

    def with_agent(self, agent: int) -> "ObservationGraph":
        nf = self.node_features.copy()
        nf[:, 0] = 0.0
        nf[agent, 0] = 1.0
        return replace(self, node_features=nf, agent_id=agent)

    def to_record(self) -> dict:
        return {
            "observer_id": self.observer_id, "agent_id": self.agent_id, "time_us": self.time_us,
            "senders": self.senders.tolist(), "receivers": self.receivers.tolist(),
            "node_features": self.node_features.tolist(), "edge_features": self.edge_features.tolist(),
            "global_features": self.global_features.tolist(),
            "node_timestamps": None if self.node_timestamps is None else self.node_timestamps.tolist(),
        }


class Telemetry:
    """Snapshot recording plus observation assembly for a fixed topology."""

    def __init__(self, topo: Topology):
        self.topo = topo
        self.n = topo.num_nodes
        self.edges = topo.edges
        self.senders = np.array([u for u, _ in self.edges], dtype=np.int64)
        self.receivers = np.array([v for _, v in self.edges], dtype=np.int64)
        self.kappa_us = shortest_delays_us(topo)
        self.central = int(np.argmin(self.kappa_us.max(axis=1)))
        self.store = SnapshotStore(self.n)
        self.now_us = 0
        self._static = np.array(
            [[topo.datarate(u, v) / 100.0, topo.delay(u, v) / 10.0] for u, v in self.edges])
        self._degree = np.array([topo.degree(u) / 10.0 for u in range(self.n)])
        self._buffer = np.array([topo.buffer_bytes(u, v) for u, v in self.edges], dtype=float)

    def record_idle(self, timestamp_us: int) -> None:
        """Zero-traffic snapshots, used at episode start."""
        ne = len(self.edges)
        z = np.zeros(ne, dtype=np.int64)
        trace = StepTrace(timestamp_us, timestamp_us, [], np.zeros((self.n, self.n), np.int64),
                          np.zeros((self.n, self.n), np.int64), np.zeros(self.n, np.int64),
                          np.zeros(self.n, np.int64), z, z, z, z, np.zeros(ne))
        self.record(trace)

    def record(self, trace: StepTrace) -> list[NodeSnapshot]:
        """Store one NodeSnapshot per node, stamped with the trace's end time."""
        ts = trace.t_end_us
        dur = max(trace.duration_us, 1)
        snaps = []
        for u in range(self.n):
            snaps.append(NodeSnapshot(u, ts, trace.node_tx[u].copy(), trace.node_rx[u].copy(),
                                      int(trace.node_drop[u]), int(trace.node_discard[u])))
        for e, (u, v) in enumerate(self.edges):
            buf = self._buffer[e]
            snaps[u].outgoing[v] = OutgoingEdgeSnapshot(
                v, int(trace.edge_queue[e]), float(trace.edge_queue[e] / buf),
                float(trace.edge_queue_integral[e] / (buf * dur)) if trace.duration_us else 0.0,
                int(trace.edge_drop[e]), int(trace.edge_tx[e]),
                self.topo.datarate(u, v), self.topo.delay(u, v))
            snaps[v].incoming[u] = IncomingEdgeSnapshot(u, int(trace.edge_rx[e]))
        for s in snaps:
            self.store.add(s)
        self.now_us = ts
        return snaps

    def visible_snapshots(self, observer: int, now_us: int | None = None) -> list[NodeSnapshot | None]:
        now = self.now_us if now_us is None else now_us
        if observer == BIRDSEYE:
            return [self.store.latest(u, now) for u in range(self.n)]
        return [self.store.latest(u, now - int(self.kappa_us[observer, u])) for u in range(self.n)]

    def assemble(self, observer: int, now_us: int | None = None, agent: int | None = None) -> ObservationGraph:
        """Observation graph as seen by ``observer`` (BIRDSEYE for the undelayed view)."""
        now = self.now_us if now_us is None else now_us
        snaps = self.visible_snapshots(observer, now)
        n, ne = self.n, len(self.edges)
        node_f = np.zeros((n, len(NODE_FEATURES)))
        stamps = np.full(n, -1, dtype=np.int64)
        self_id = agent if agent is not None else observer
        if self_id >= 0:
            node_f[self_id, 0] = 1.0
        node_f[:, 7] = self._degree
        for u, s in enumerate(snaps):
            if s is None:
                node_f[u, 1] = 1.0
                continue
            stamps[u] = s.timestamp_us
            node_f[u, 2] = (now - s.timestamp_us) / 10_000.0
            node_f[u, 3] = s.tx_by_dst.sum() / MB
            node_f[u, 4] = s.rx_by_src.sum() / MB
            node_f[u, 5] = s.dropped_bytes / MB
            node_f[u, 6] = s.discarded_bytes / MB
        edge_f = np.zeros((ne, len(EDGE_FEATURES)))
        edge_f[:, :2] = self._static
        for e, (u, v) in enumerate(self.edges):
            su, sv = snaps[u], snaps[v]
            if su is None:
                edge_f[e, 7] = 1.0
            else:
                out = su.outgoing[v]
                edge_f[e, 2] = out.queue_fraction
                edge_f[e, 3] = out.queue_load
                edge_f[e, 4] = out.tx_bytes / MB
                edge_f[e, 5] = out.drop_bytes / MB
            if sv is not None:
                edge_f[e, 6] = sv.incoming[u].rx_bytes / MB
        glob = np.array([n / 10.0, ne / 10.0, node_f[:, 3].sum(), node_f[:, 4].sum(),
                         node_f[:, 5].sum(), edge_f[:, 2].mean()])
        return ObservationGraph(n, self.senders, self.receivers, node_f, edge_f, glob,
                                observer, -1 if agent is None else agent, now, stamps)
