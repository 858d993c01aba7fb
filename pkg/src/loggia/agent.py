"""Runs a policy inside the environment loop: features, inference timing, action stage."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, RoutingEnv, StepResult
from .policy import LoggiaPolicy, act, batch_arrays, deterministic_weights, graph_arrays, weights_to_action
from .routing import sp_baseline, to_action_single
from .topology import Topology
from .traffic import FlowSchedule


@dataclass
class Decision:
    action: object
    inference_ms: np.ndarray
    raw: list  # per agent (node_x, edge_x incl. previous weights, global_x, senders, receivers), unnormalized
    weights: list
    log_probs: np.ndarray
    mu: list
    sigma: list


class PolicyAgent:
    """Stateful wrapper that keeps each agent's previous link weights between steps."""

    def __init__(self, policy: LoggiaPolicy, normalizer=None, synthetic_inference_ms: float | None = None):
        self.policy = policy
        self.normalizer = normalizer
        self.synthetic_inference_ms = synthetic_inference_ms
        self.prev = None

    def reset(self) -> None:
        self.prev = None

    def decide(self, topo: Topology, result: StepResult, multi: bool, explore: bool,
               rng: np.random.Generator | None = None) -> Decision:
        graphs = result.observations
        n_agents = len(graphs)
        if self.prev is None:
            self.prev = [np.zeros(graphs[0].num_edges) for _ in graphs]
        feed = self.policy.cfg.feed_previous_weights
        t0 = time.perf_counter()
        raw, items = [], []
        for g, w in zip(graphs, self.prev):
            raw.append(graph_arrays(g, w if feed else None))
            items.append(graph_arrays(g, w if feed else None, self.normalizer))
        batch = batch_arrays(items)
        mu_t, sigma_t = self.policy(batch)
        mus, sigmas = batch.split_edges(mu_t.data), batch.split_edges(sigma_t.data)
        t_forward = time.perf_counter() - t0
        weights, logps = [], []
        for m, s in zip(mus, sigmas):
            w, lp = act(m, s, explore, rng, self.policy.cfg.log_space)
            weights.append(w)
            logps.append(lp)
        t1 = time.perf_counter()
        action = weights_to_action(topo, weights, multi)
        t_paths = time.perf_counter() - t1
        self.prev = [w.copy() for w in weights]
        if self.synthetic_inference_ms is not None:
            kac = np.full(topo.num_nodes, float(self.synthetic_inference_ms))
        else:
            # agents infer concurrently: each pays one forward share plus its own path computation
            per_agent = 1000.0 * (t_forward + t_paths) / n_agents
            kac = np.full(topo.num_nodes, per_agent if multi else 1000.0 * (t_forward + t_paths))
        return Decision(action, kac, raw, weights, np.asarray(logps), mus, sigmas)


def run_policy_episode(env: RoutingEnv, agent: PolicyAgent, topo: Topology, schedule: FlowSchedule,
                       explore: bool = False, rng=None, step_callback=None) -> dict:
    result = env.reset(topo, schedule)
    agent.reset()
    multi = env.config.multi
    while not result.done:
        d = agent.decide(topo, result, multi, explore, rng)
        result = env.step(d.action, d.inference_ms)
        if step_callback is not None:
            step_callback(result, d)
    return env.episode.summary()


def run_baseline_episode(topo: Topology, schedule: FlowSchedule, metric: str, config: EnvConfig) -> dict:
    """Static shortest paths through the full environment loop, zero inference delay."""
    cfg = EnvConfig(**{**config.__dict__, "observe": False})
    env = RoutingEnv(cfg)
    env.reset(topo, schedule)
    action = to_action_single(topo, sp_baseline(topo, metric))
    for _ in range(cfg.steps):
        env.step(action, 0.0)
    return env.episode.summary()


METRIC_KEYS = ("delivered_mb", "delay_ms", "queue_load_pct", "tcp_discard_mb", "dropped_mb")


def evaluate(topo: Topology, schedules, config: EnvConfig, policy: LoggiaPolicy | None = None,
             normalizer=None, baseline: str | None = None, synthetic_inference_ms: float | None = None) -> list[dict]:
    """Per-episode metrics of a deterministic policy or a static baseline, in schedule order."""
    if (policy is None) == (baseline is None):
        raise ValueError("give exactly one of policy or baseline")
    rows = []
    for k, schedule in enumerate(schedules):
        if baseline is not None:
            m = run_baseline_episode(topo, schedule, baseline, config)
        else:
            agent = PolicyAgent(policy, normalizer, synthetic_inference_ms)
            m = run_policy_episode(RoutingEnv(config), agent, topo, schedule)
        rows.append({"episode": k, "seed": schedule.seed, **{key: m[key] for key in METRIC_KEYS}})
    return rows


def aggregate(rows: list[dict]) -> dict:
    return {key: float(np.mean([r[key] for r in rows])) for key in METRIC_KEYS}


__all__ = ["PolicyAgent", "Decision", "run_policy_episode", "run_baseline_episode", "evaluate", "aggregate",
           "METRIC_KEYS", "deterministic_weights"]
