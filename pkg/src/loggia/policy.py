"""Link-weight routing policy: message passing over the observation graph,
per-edge log-normal link weights, and a shortest-path action stage.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Segments, Tensor
from .nn.layers import MLP, LayerNorm, Linear, Module
from .routing import to_action_local, to_action_single
from .telemetry import EDGE_FEATURES, FEATURE_LAYOUT_VERSION, GLOBAL_FEATURES, NODE_FEATURES, ObservationGraph
from .topology import Topology

SIGMA_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MpnConfig:
    steps: int = 4
    latent: int = 32
    hidden_layers: int = 2
    slope: float = 0.01
    dropout: float = 0.0
    log_space: bool = True
    feed_previous_weights: bool = True
    aggregate: str = "incoming"  # edges aggregated into a node: "incoming" or "outgoing"
    readout_scale: float = 0.01
    init_sigma: float = 0.3

    def __post_init__(self):
        if self.steps < 1 or self.latent < 1:
            raise ValueError("steps and latent must be >= 1")
        if self.aggregate not in ("incoming", "outgoing"):
            raise ValueError(f"aggregate: expected 'incoming' or 'outgoing', got {self.aggregate!r}")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported")


class FeatureLayoutError(ValueError):
    pass


@dataclass
class GraphBatch:
    """Disjoint union of observation graphs with precomputed segment groupings."""

    node_x: np.ndarray
    edge_x: np.ndarray
    global_x: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    edge_offsets: np.ndarray

    def __post_init__(self):
        n, g = len(self.node_x), len(self.global_x)
        self.incoming = Segments(self.receivers, n)
        self.outgoing = Segments(self.senders, n)
        self.nodes_by_graph = Segments(self.node_graph, g)
        self.edges_by_graph = Segments(self.edge_graph, g)

    @property
    def num_graphs(self) -> int:
        return len(self.global_x)

    def split_edges(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[a:b] for a, b in zip(self.edge_offsets[:-1], self.edge_offsets[1:])]


def batch_arrays(items) -> GraphBatch:
    """Build a batch from ``(node_x, edge_x, global_x, senders, receivers)`` tuples."""
    node_x, edge_x, glob, snd, rcv, ng, eg, offs = [], [], [], [], [], [], [], [0]
    base = 0
    for i, (nx, ex, gx, s, r) in enumerate(items):
        node_x.append(nx)
        edge_x.append(ex)
        glob.append(gx)
        snd.append(np.asarray(s) + base)
        rcv.append(np.asarray(r) + base)
        ng.append(np.full(len(nx), i))
        eg.append(np.full(len(ex), i))
        offs.append(offs[-1] + len(ex))
        base += len(nx)
    return GraphBatch(np.concatenate(node_x), np.concatenate(edge_x), np.stack(glob),
                      np.concatenate(snd).astype(np.int64), np.concatenate(rcv).astype(np.int64),
                      np.concatenate(ng).astype(np.int64), np.concatenate(eg).astype(np.int64),
                      np.asarray(offs, dtype=np.int64))


def graph_arrays(graph: ObservationGraph, prev_weights=None, normalizer=None):
    nx, ex, gx = graph.node_features, graph.edge_features, graph.global_features
    if normalizer is not None:
        nx, ex, gx = normalizer.normalize(nx, ex, gx)
    if prev_weights is not None:
        ex = np.concatenate([ex, np.asarray(prev_weights, dtype=float).reshape(-1, 1)], axis=1)
    return nx, ex, gx, graph.senders, graph.receivers


def batch_graphs(graphs, prev_weights=None, normalizer=None) -> GraphBatch:
    if prev_weights is None:
        prev_weights = [None] * len(graphs)
    return batch_arrays([graph_arrays(g, w, normalizer) for g, w in zip(graphs, prev_weights)])


def _aggregate(x: Tensor, seg: Segments) -> Tensor:
    return ad.concat([ad.segment_mean(x, seg), ad.segment_min(x, seg)], axis=1)


class MPN(Module):
    """Encode-process network: L rounds of residual edge, node and global updates."""

    def __init__(self, cfg: MpnConfig, dims: tuple[int, int, int], rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.dims = dims
        dn, de, dg = dims
        d, h, k = cfg.latent, cfg.latent, cfg.hidden_layers
        self.enc_node = self.child("enc_node", Linear(dn, d, rng))
        self.enc_edge = self.child("enc_edge", Linear(de, d, rng))
        self.enc_glob = self.child("enc_glob", Linear(dg, d, rng))
        self.f_edge, self.f_node, self.f_glob = [], [], []
        self.n_edge, self.n_node, self.n_glob = [], [], []
        for l in range(cfg.steps):
            self.f_edge.append(self.child(f"f_edge{l}", MLP(4 * d, d, rng, h, k, slope=cfg.slope)))
            self.f_node.append(self.child(f"f_node{l}", MLP(4 * d, d, rng, h, k, slope=cfg.slope)))
            self.f_glob.append(self.child(f"f_glob{l}", MLP(5 * d, d, rng, h, k, slope=cfg.slope)))
            self.n_edge.append(self.child(f"ln_edge{l}", LayerNorm(d)))
            self.n_node.append(self.child(f"ln_node{l}", LayerNorm(d)))
            self.n_glob.append(self.child(f"ln_glob{l}", LayerNorm(d)))

    def __call__(self, batch: GraphBatch) -> tuple[Tensor, Tensor, Tensor]:
        dn, de, dg = self.dims
        if batch.node_x.shape[1] != dn or batch.edge_x.shape[1] != de or batch.global_x.shape[1] != dg:
            raise FeatureLayoutError(
                f"feature layout mismatch: got node/edge/global widths "
                f"{batch.node_x.shape[1]}/{batch.edge_x.shape[1]}/{batch.global_x.shape[1]}, "
                f"expected {dn}/{de}/{dg}")
        xv = self.enc_node(Tensor(batch.node_x))
        xe = self.enc_edge(Tensor(batch.edge_x))
        xu = self.enc_glob(Tensor(batch.global_x))
        agg_seg = batch.incoming if self.cfg.aggregate == "incoming" else batch.outgoing
        for l in range(self.cfg.steps):
            inp = ad.concat([ad.gather(xv, batch.senders), ad.gather(xv, batch.receivers), xe,
                             ad.gather(xu, batch.edge_graph)], axis=1)
            xe = xe + self.n_edge[l](self.f_edge[l](inp))
            inp = ad.concat([xv, _aggregate(xe, agg_seg), ad.gather(xu, batch.node_graph)], axis=1)
            xv = xv + self.n_node[l](self.f_node[l](inp))
            inp = ad.concat([_aggregate(xv, batch.nodes_by_graph), _aggregate(xe, batch.edges_by_graph), xu],
                            axis=1)
            xu = xu + self.n_glob[l](self.f_glob[l](inp))
        return xv, xe, xu


def feature_dims(cfg: MpnConfig) -> tuple[int, int, int]:
    return (len(NODE_FEATURES), len(EDGE_FEATURES) + (1 if cfg.feed_previous_weights else 0),
            len(GLOBAL_FEATURES))


class LoggiaPolicy(Module):
    """Per-edge (mu, sigma) from the final edge latents."""

    def __init__(self, cfg: MpnConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or MpnConfig()
        rng = np.random.default_rng([seed, 1])
        self.mpn = self.child("mpn", MPN(self.cfg, feature_dims(self.cfg), rng))
        self.readout = self.child("readout", MLP(self.cfg.latent, 2, rng, self.cfg.latent,
                                                 self.cfg.hidden_layers, out_scale=self.cfg.readout_scale,
                                                 slope=self.cfg.slope))
        self.readout.out.b.data[1] = math.log(math.expm1(self.cfg.init_sigma - SIGMA_FLOOR))

    def __call__(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        _, xe, _ = self.mpn(batch)
        out = self.readout(xe)
        mu = ad.column(out, 0)
        sigma = ad.softplus(ad.column(out, 1)) + SIGMA_FLOOR
        return mu, sigma

    def manifest(self) -> dict:
        return {"mpn_config": asdict(self.cfg), "feature_layout_version": FEATURE_LAYOUT_VERSION,
                "node_features": list(NODE_FEATURES), "edge_features": list(EDGE_FEATURES),
                "global_features": list(GLOBAL_FEATURES)}


class ValueFunction(Module):
    """Graph-level value: MPN, node readout MLP, global max pooling."""

    def __init__(self, cfg: MpnConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or MpnConfig()
        rng = np.random.default_rng([seed, 2])
        self.mpn = self.child("mpn", MPN(self.cfg, feature_dims(self.cfg), rng))
        self.readout = self.child("readout", MLP(self.cfg.latent, 1, rng, self.cfg.latent,
                                                 self.cfg.hidden_layers, slope=self.cfg.slope))

    def __call__(self, batch: GraphBatch) -> Tensor:
        xv, _, _ = self.mpn(batch)
        node_v = self.readout(xv)
        return ad.column(ad.segment_max(node_v, batch.nodes_by_graph), 0)


# -- action distribution -------------------------------------------------

def deterministic_weights(mu: np.ndarray, log_space: bool = True) -> np.ndarray:
    if log_space:
        return np.exp(mu)
    return np.logaddexp(0.0, mu) + SIGMA_FLOOR


def act(mu: np.ndarray, sigma: np.ndarray, explore: bool, rng: np.random.Generator | None = None,
        log_space: bool = True) -> tuple[np.ndarray, float]:
    """Link weights and their joint log-density.

    Exploration samples log-weights from N(mu, sigma), i.e. weights from a
    log-normal. Without exploration the weights are exp(mu) and the returned
    log-density is evaluated at that point.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if not log_space:
        y = mu + sigma * rng.standard_normal(mu.shape) if explore else mu
        w = np.logaddexp(0.0, y) + SIGMA_FLOOR
        lp = -np.log(sigma) - 0.5 * LOG_2PI - (y - mu) ** 2 / (2 * sigma ** 2)
        return w, float(lp.sum())
    y = mu + sigma * rng.standard_normal(mu.shape) if explore else mu
    return np.exp(y), float(lognormal_logpdf(np.exp(y), mu, sigma).sum())


def lognormal_logpdf(w, mu, sigma) -> np.ndarray:
    y = np.log(w)
    return -y - np.log(sigma) - 0.5 * LOG_2PI - (y - mu) ** 2 / (2 * sigma ** 2)


def log_prob(mu: Tensor, sigma: Tensor, weights: np.ndarray, edge_graph: Segments | None = None,
             log_space: bool = True) -> Tensor:
    """Per-graph sum of per-edge log-densities of fixed ``weights`` as a function of (mu, sigma)."""
    if log_space:
        y = np.log(weights)
        const = -y - 0.5 * LOG_2PI
    else:
        y = np.log(np.expm1(np.maximum(weights - SIGMA_FLOOR, 1e-300)))
        const = np.full_like(y, -0.5 * LOG_2PI)
    z = ad.div(ad.neg(mu) + y, sigma)
    per_edge = ad.neg(ad.log(sigma)) + ad.mul(ad.square(z), -0.5) + const
    if edge_graph is None:
        return ad.sum_(per_edge)
    return ad.scatter_add(per_edge, edge_graph.index, edge_graph.num)


def entropy(mu: Tensor, sigma: Tensor, edge_graph: Segments, include_mu: bool = False) -> Tensor:
    """Per-graph entropy summed over edges; log-space (Gaussian) unless ``include_mu``."""
    per_edge = ad.log(sigma) + 0.5 * (LOG_2PI + 1.0)
    if include_mu:
        per_edge = per_edge + mu
    return ad.scatter_add(per_edge, edge_graph.index, edge_graph.num)


def kl_normal(mu_old: np.ndarray, sigma_old: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Per-edge KL(old || new) between log-space normals (equal to the log-normal KL)."""
    return np.log(sigma / sigma_old) + (sigma_old ** 2 + (mu_old - mu) ** 2) / (2 * sigma ** 2) - 0.5


# -- action stage --------------------------------------------------------

def weights_to_action(topo: Topology, weights, multi: bool):
    """Single agent: full table from one weight vector. Multi: each agent's row from its own weights."""
    if not multi:
        w = weights[0] if isinstance(weights, (list, tuple)) else weights
        return to_action_single(topo, w)
    return {u: to_action_local(topo, u, weights[u]) for u in range(topo.num_nodes)}
