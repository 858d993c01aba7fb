"""Closed-loop routing environment with delay-aware observation and action installation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netsim import DELIVER, DISCARD, Simulator, StepTrace
from .routing import RoutingAction, sp_baseline, to_action_single
from .telemetry import BIRDSEYE, MB, ObservationGraph, Telemetry
from .topology import Topology
from .traffic import FlowSchedule

MODES = ("Birdseye-Single", "Central-Single", "Birdseye-Multi", "Central-Multi", "Local-Multi")


@dataclass
class EnvConfig:
    steps: int = 400
    step_ms: float = 5.0
    mode: str = "Local-Multi"
    lambda_ac: float = 0.2
    lambda_r: float | None = None  # None: 1.0 for single-agent, 0.0 for multi-agent modes
    lambda_decay: float = 0.8
    decay_hops: int = 3
    observe: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.steps < 1 or self.step_ms <= 0:
            raise ValueError("steps and step_ms must be positive")
        if not 0.0 <= self.lambda_ac <= 1.0:
            raise ValueError("lambda_ac must lie in [0, 1]")
        if self.lambda_r is not None and not 0.0 <= self.lambda_r <= 1.0:
            raise ValueError("lambda_r must lie in [0, 1]")

    @property
    def multi(self) -> bool:
        return self.mode.endswith("Multi")

    @property
    def observer(self) -> str:
        return self.mode.split("-")[0]

    @property
    def reward_mix(self) -> float:
        if self.lambda_r is not None:
            return self.lambda_r
        return 0.0 if self.multi else 1.0

    @property
    def episode_ms(self) -> float:
        return self.steps * self.step_ms


@dataclass
class StepResult:
    observations: list
    value_observation: ObservationGraph | None
    reward_global: float
    reward_nodes: np.ndarray
    reward: object  # float (single-agent) or per-agent array
    metrics: dict
    done: bool
    t: int
    trace: StepTrace | None = None


def compute_rewards(trace: StepTrace, lambda_r: float, num_nodes: int, multi: bool,
                    decay: float = 0.8, hops: int = 3):
    """Global goodput reward, per-node spatially decayed rewards, and the mixed reward.

    Each terminal packet event carries its payload in MB as base value,
    positive for deliveries and negative for drops and discards. The k-th
    most recent forwarding node (k = 1..hops) receives base * decay**(k-1).
    """
    per_node = np.zeros(num_nodes)
    delivered = 0
    for ev in trace.events:
        base = ev.nbytes / MB
        if ev.kind == DELIVER:
            delivered += ev.nbytes
        else:
            base = -base
        fw = ev.forwarders
        for k in range(1, min(hops, len(fw)) + 1):
            per_node[fw[-k]] += base * decay ** (k - 1)
    glob = delivered / MB
    if multi:
        mixed = (1.0 - lambda_r) * per_node + lambda_r * glob
    else:
        mixed = (1.0 - lambda_r) * float(per_node.mean()) + lambda_r * glob
    return glob, per_node, mixed


def step_metrics(trace: StepTrace, buffers: np.ndarray) -> dict:
    delays = [(e.time_us - e.sent_us) / 1000.0 for e in trace.events if e.kind == DELIVER]
    dur = max(trace.duration_us, 1)
    load = trace.edge_queue_integral / (buffers * dur)
    return {
        "delivered_bytes": trace.delivered_bytes,
        "delivered_mb": trace.delivered_bytes / MB,
        "dropped_mb": trace.dropped_bytes / MB,
        "tcp_discard_mb": trace.bytes_of(DISCARD) / MB,
        "delay_sum_ms": math.fsum(delays),
        "delivered_packets": len(delays),
        "queue_load_pct": 100.0 * float(load.mean()) if trace.duration_us else 0.0,
    }


@dataclass
class EpisodeMetrics:
    delivered_bytes: int = 0
    delivered_mb: float = 0.0
    dropped_mb: float = 0.0
    tcp_discard_mb: float = 0.0
    delay_sum_ms: float = 0.0
    delivered_packets: int = 0
    queue_load_sum: float = 0.0
    steps: int = 0
    reward_global_sum: float = 0.0
    _parts: list = field(default_factory=list, repr=False)

    def add(self, m: dict) -> None:
        self.delivered_bytes += m["delivered_bytes"]
        self.delivered_mb = self.delivered_bytes / MB
        self.dropped_mb += m["dropped_mb"]
        self.tcp_discard_mb += m["tcp_discard_mb"]
        self.delay_sum_ms += m["delay_sum_ms"]
        self.delivered_packets += m["delivered_packets"]
        self.queue_load_sum += m["queue_load_pct"]
        self.steps += 1

    def summary(self) -> dict:
        return {
            "delivered_mb": self.delivered_mb,
            "delay_ms": self.delay_sum_ms / self.delivered_packets if self.delivered_packets else 0.0,
            "queue_load_pct": self.queue_load_sum / self.steps if self.steps else 0.0,
            "tcp_discard_mb": self.tcp_discard_mb,
            "dropped_mb": self.dropped_mb,
        }


class RoutingEnv:
    """Step-based routing MDP over the packet simulator."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.sim: Simulator | None = None

    @property
    def agents(self) -> list[int]:
        return list(range(self.topo.num_nodes)) if self.config.multi else [0]

    def reset(self, topo: Topology, schedule: FlowSchedule, config: EnvConfig | None = None,
              seed: int = 0) -> StepResult:
        if config is not None:
            self.config = config
        self.topo = topo
        self.schedule = schedule
        self.seed = seed
        self.t = 0
        self.initial_action = to_action_single(topo, sp_baseline(topo, "EIGRP"))
        self.sim = Simulator(topo, schedule, self.initial_action)
        self.telemetry = Telemetry(topo)
        self.telemetry.record_idle(0)
        self.kappa_ms = self.telemetry.kappa_us / 1000.0
        self.central = self.telemetry.central
        self.buffers = np.array([topo.buffer_bytes(u, v) for u, v in topo.edges], dtype=float)
        self.episode = EpisodeMetrics()
        obs, vobs = self._observe()
        n = topo.num_nodes
        zero = np.zeros(n) if self.config.multi else 0.0
        return StepResult(obs, vobs, 0.0, np.zeros(n), zero, {}, False, 0)

    def _observe(self):
        if not self.config.observe:
            return [], None
        tel, mode, n = self.telemetry, self.config.mode, self.topo.num_nodes
        if mode == "Local-Multi":
            obs = [tel.assemble(u) for u in range(n)]
            return obs, tel.assemble(self.central)
        base = tel.assemble(BIRDSEYE if mode.startswith("Birdseye") else self.central)
        if mode.endswith("Single"):
            return [base], base
        return [base.with_agent(u) for u in range(n)], base

    def install_delay_ms(self, u: int, inference_ms: float) -> float:
        mode = self.config.mode
        if mode.startswith("Birdseye"):
            return 0.0
        delay = self.config.lambda_ac * inference_ms
        if mode.startswith("Central"):
            delay += self.kappa_ms[self.central, u]
        return float(delay)

    def _rows(self, actions) -> dict[int, np.ndarray]:
        n = self.topo.num_nodes
        if isinstance(actions, RoutingAction):
            rows = actions.rows()
        elif isinstance(actions, np.ndarray) and actions.ndim == 2:
            rows = {u: actions[u] for u in range(n)}
        else:
            rows = dict(actions)
        missing = []
        for u in range(n):
            row = rows.get(u)
            for z in range(n):
                if z == u:
                    continue
                if row is None or (isinstance(row, dict) and z not in row) or \
                        (not isinstance(row, dict) and (len(row) <= z or row[z] < 0)):
                    missing.append((u, z))
        if missing:
            raise ValueError(f"missing forwarding rows for (router, destination) pairs: {missing}")
        return rows

    def _inference(self, inference_ms) -> np.ndarray:
        n = self.topo.num_nodes
        if np.isscalar(inference_ms):
            return np.full(n, float(inference_ms))
        if isinstance(inference_ms, dict):
            return np.array([float(inference_ms.get(u, 0.0)) for u in range(n)])
        arr = np.asarray(inference_ms, dtype=float)
        if arr.shape == (1,):
            return np.full(n, arr[0])
        if arr.shape != (n,):
            raise ValueError(f"expected {n} inference times, got shape {arr.shape}")
        return arr

    def step(self, actions, inference_ms=0.0) -> StepResult:
        if self.sim is None:
            raise RuntimeError("call reset() first")
        if self.t >= self.config.steps:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.config
        rows = self._rows(actions)
        kac = self._inference(inference_ms)
        now_ms = self.sim.now / 1000.0
        for u in range(self.topo.num_nodes):
            self.sim.install_forwarding(u, rows[u], now_ms + self.install_delay_ms(u, kac[u]))
        self.t += 1
        trace = self.sim.advance(self.t * cfg.step_ms)
        if cfg.observe:
            self.telemetry.record(trace)
        glob, per_node, mixed = compute_rewards(trace, cfg.reward_mix, self.topo.num_nodes, cfg.multi,
                                                cfg.lambda_decay, cfg.decay_hops)
        metrics = step_metrics(trace, self.buffers)
        self.episode.add(metrics)
        self.episode.reward_global_sum += glob
        obs, vobs = self._observe()
        return StepResult(obs, vobs, glob, per_node, mixed, metrics, self.t >= cfg.steps, self.t, trace)


def run_static_episode(topo: Topology, schedule: FlowSchedule, metric: str, horizon_ms: float = 2000.0,
                       step_ms: float = 5.0, mode: str = "Birdseye-Single") -> dict:
    """Episode summary for a static shortest-path baseline (no inference delay)."""
    steps = int(round(horizon_ms / step_ms))
    cfg = EnvConfig(steps=steps, step_ms=step_ms, mode=mode, lambda_ac=0.0, observe=False)
    env = RoutingEnv(cfg)
    env.reset(topo, schedule)
    action = to_action_single(topo, sp_baseline(topo, metric))
    for _ in range(steps):
        env.step(action, 0.0)
    return env.episode.summary()
