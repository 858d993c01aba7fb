"""Network topologies: routers joined by symmetric point-to-point links."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "loggia-topology"
FORMAT_VERSION = 1

SIZE_CLASSES = {"XS": (6, 10), "S": (11, 25), "M": (26, 50), "L": (51, 100)}
DATARATE_RANGE = (50.0, 200.0)  # Mbps
DELAY_RANGE = (1.0, 10.0)  # ms
MEAN_DEGREE = 3.0


class TopologyError(ValueError):
    """Raised for malformed or invalid topology data."""


@dataclass(frozen=True)
class Link:
    u: int
    v: int
    datarate_mbps: float
    delay_ms: float


@dataclass(frozen=True)
class Topology:
    """Undirected attributed graph. Node ids are dense integers ``0..num_nodes-1``."""

    num_nodes: int
    links: tuple[Link, ...]
    name: str = ""
    _adj: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        validate(self)
        adj: dict[int, dict[int, Link]] = {n: {} for n in range(self.num_nodes)}
        for link in self.links:
            adj[link.u][link.v] = link
            adj[link.v][link.u] = link
        object.__setattr__(self, "_adj", adj)

    @property
    def nodes(self) -> list[int]:
        return list(range(self.num_nodes))

    def neighbors(self, u: int) -> list[int]:
        return sorted(self._adj[u])

    def degree(self, u: int) -> int:
        return len(self._adj[u])

    def link(self, u: int, v: int) -> Link:
        return self._adj[u][v]

    def has_link(self, u: int, v: int) -> bool:
        return v in self._adj.get(u, {})

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Directed edges, sorted by (source, target)."""
        return sorted((u, v) for u in range(self.num_nodes) for v in self._adj[u])

    def datarate(self, u: int, v: int) -> float:
        return self._adj[u][v].datarate_mbps

    def delay(self, u: int, v: int) -> float:
        return self._adj[u][v].delay_ms

    def buffer_bytes(self, u: int, v: int) -> int:
        """Send-buffer capacity: link capacity times the link's own round-trip time."""
        link = self._adj[u][v]
        return buffer_size(link.datarate_mbps, link.delay_ms)


def buffer_size(datarate_mbps: float, delay_ms: float) -> int:
    # Mbps * ms = 1e3 bits; RTT = 2 * delay
    return int(round(datarate_mbps * 2.0 * delay_ms * 1000.0 / 8.0))


def is_connected(num_nodes: int, links) -> bool:
    if num_nodes == 0:
        return False
    adj = {n: [] for n in range(num_nodes)}
    for link in links:
        adj[link.u].append(link.v)
        adj[link.v].append(link.u)
    seen = {0}
    queue = deque([0])
    while queue:
        n = queue.popleft()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                queue.append(m)
    return len(seen) == num_nodes


def validate(topo: Topology) -> None:
    if not isinstance(topo.num_nodes, (int, np.integer)) or topo.num_nodes < 2:
        raise TopologyError(f"nodes: need at least 2 routers, got {topo.num_nodes!r}")
    seen = set()
    for i, link in enumerate(topo.links):
        for name in ("u", "v"):
            n = getattr(link, name)
            if not isinstance(n, (int, np.integer)) or not 0 <= n < topo.num_nodes:
                raise TopologyError(f"links[{i}].{name}: invalid node id {n!r}")
        if link.u == link.v:
            raise TopologyError(f"links[{i}]: self-loop at node {link.u}")
        key = (min(link.u, link.v), max(link.u, link.v))
        if key in seen:
            raise TopologyError(f"links[{i}]: duplicate link {key}")
        seen.add(key)
        if not np.isfinite(link.datarate_mbps) or link.datarate_mbps <= 0:
            raise TopologyError(f"links[{i}].datarate_mbps: must be positive, got {link.datarate_mbps!r}")
        if not np.isfinite(link.delay_ms) or link.delay_ms <= 0:
            raise TopologyError(f"links[{i}].delay_ms: must be positive, got {link.delay_ms!r}")
    if not is_connected(topo.num_nodes, topo.links):
        raise TopologyError("graph not connected")


def build_mini5() -> Topology:
    """Five-node reference network; node 1 is its minimum-eccentricity (central) node."""
    spec = [(0, 1, 3.0), (0, 2, 2.0), (1, 2, 4.0), (2, 3, 4.0), (1, 4, 6.0), (3, 4, 5.0)]
    return Topology(5, tuple(Link(u, v, 100.0, d) for u, v, d in spec), name="mini5")


def generate_nx(size_class: str, seed: int) -> Topology:
    """Random connected topology of the given size class.

    A random spanning tree guarantees connectivity; extra edges are added
    independently so the mean degree is about three.
    """
    if size_class not in SIZE_CLASSES:
        raise TopologyError(f"size_class: expected one of {sorted(SIZE_CLASSES)}, got {size_class!r}")
    lo, hi = SIZE_CLASSES[size_class]
    rng = np.random.default_rng([seed, lo, hi])
    n = int(rng.integers(lo, hi + 1))
    order = rng.permutation(n)
    pairs = set()
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        pairs.add((min(a, b), max(a, b)))
    free = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in pairs]
    wanted = MEAN_DEGREE * n / 2.0 - (n - 1)
    p = float(np.clip(wanted / max(len(free), 1), 0.0, 1.0))
    for pair, keep in zip(free, rng.random(len(free)) < p):
        if keep:
            pairs.add(pair)
    links = []
    for a, b in sorted(pairs):
        rate = float(np.clip(rng.uniform(*DATARATE_RANGE), *DATARATE_RANGE))
        delay = float(np.clip(rng.uniform(*DELAY_RANGE), *DELAY_RANGE))
        # microsecond / 0.1 Mbps resolution keeps the simulator's integer clock exact
        links.append(Link(a, b, round(rate, 1), round(delay, 3)))
    return Topology(n, tuple(links), name=f"nx-{size_class}-{seed}")


def topology_to_dict(topo: Topology) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": topo.name,
        "nodes": topo.nodes,
        "links": [
            {"u": l.u, "v": l.v, "datarate_mbps": l.datarate_mbps, "delay_ms": l.delay_ms}
            for l in topo.links
        ],
    }


def topology_from_dict(doc: dict) -> Topology:
    if not isinstance(doc, dict):
        raise TopologyError("document: expected a mapping")
    if doc.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise TopologyError(f"format: expected {FORMAT_NAME!r}, got {doc.get('format')!r}")
    if doc.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise TopologyError(f"version: unsupported {doc.get('version')!r}")
    nodes = doc.get("nodes")
    if isinstance(nodes, int):
        nodes = list(range(nodes))
    if not isinstance(nodes, list) or nodes != list(range(len(nodes))):
        raise TopologyError("nodes: expected dense ids 0..|V|-1")
    raw = doc.get("links")
    if not isinstance(raw, list):
        raise TopologyError("links: expected a list")
    links = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise TopologyError(f"links[{i}]: expected a mapping")
        vals = {}
        for key, cast in (("u", int), ("v", int), ("datarate_mbps", float), ("delay_ms", float)):
            if key not in item:
                raise TopologyError(f"links[{i}].{key}: missing")
            try:
                vals[key] = cast(item[key])
            except (TypeError, ValueError):
                raise TopologyError(f"links[{i}].{key}: expected a number, got {item[key]!r}") from None
        links.append(Link(**vals))
    return Topology(len(nodes), tuple(links), name=str(doc.get("name", "")))


def save_topology(topo: Topology, path) -> None:
    Path(path).write_text(json.dumps(topology_to_dict(topo), indent=2) + "\n")


def load_topology(path) -> Topology:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"document: invalid JSON ({exc})") from None
    return topology_from_dict(doc)


def resolve_topology(preset: str, seed: int = 0) -> Topology:
    """Map a preset name (``mini5``, ``nx-XS`` .. ``nx-L``) or file path to a topology."""
    if preset == "mini5":
        return build_mini5()
    if preset.startswith("nx-"):
        return generate_nx(preset[3:], seed)
    if Path(preset).is_file():
        return load_topology(preset)
    raise TopologyError(f"unknown topology preset {preset!r}")
