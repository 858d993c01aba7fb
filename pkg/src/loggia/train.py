"""PPO/MAPPO with adaptive entropy temperature, interactive imitation learning and behavior cloning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .agent import PolicyAgent
from .env import EnvConfig, RoutingEnv
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.checkpoint import load_arrays, save_arrays
from .nn.layers import Module
from .nn.optim import Adam, clip_grad_norm
from .policy import (LoggiaPolicy, MpnConfig, ValueFunction, batch_arrays, entropy, kl_normal, log_prob)
from .routing import sp_baseline
from .telemetry import BIRDSEYE, EDGE_FEATURES, GLOBAL_FEATURES, NODE_FEATURES, Telemetry
from .topology import Topology, resolve_topology
from .traffic import calibrate_intensity, generate_schedule

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 10_000_000  # training traffic seeds are drawn below this


@dataclass
class PPOConfig:
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    lr_temperature: float = 3e-4
    gamma: float = 0.95
    clip_policy: float = 0.5
    clip_value: float = 0.3
    minibatches: int = 16
    epochs: int = 10
    grad_clip: float = 0.5
    gae_lambda: float = 0.9
    max_kl: float = 10.0
    max_clip_fraction: float = 0.2
    target_entropy: float = 0.2  # per directed edge
    init_alpha: float = 0.01
    entropy_include_mu: bool = False
    il_lr: float = 5e-5
    il_epochs: int = 10
    il_minibatches: int = 16

    def __post_init__(self):
        for name in ("lr_policy", "lr_value", "lr_temperature", "gamma", "clip_policy", "clip_value",
                     "grad_clip", "max_kl", "max_clip_fraction", "init_alpha", "il_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.clip_policy <= 1 and 0 < self.clip_value <= 1):
            raise ValueError("clip ranges must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if min(self.epochs, self.minibatches, self.il_epochs, self.il_minibatches) < 1:
            raise ValueError("epochs and minibatch counts must be >= 1")


# -- observation normalization -------------------------------------------

class RunningStat:
    """Per-feature mean/variance merged batch-wise (parallel Welford)."""

    def __init__(self, dim: int):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 0 else np.ones_like(self.mean)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, len(self.mean))
        n = len(x)
        if n == 0:
            return
        mean = x.mean(axis=0)
        m2 = ((x - mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + m2 + delta ** 2 * self.count * n / total
        self.count = total


class RunningNormalizer:
    """Node/edge/global feature standardization, frozen between explicit updates."""

    def __init__(self, dims=(len(NODE_FEATURES), len(EDGE_FEATURES), len(GLOBAL_FEATURES)),
                 clip: float = 10.0, eps: float = 1e-8):
        self.stats = [RunningStat(d) for d in dims]
        self.clip = clip
        self.eps = eps

    def _norm(self, x, stat: RunningStat) -> np.ndarray:
        if stat.count == 0:
            return np.asarray(x, dtype=float)
        return np.clip((x - stat.mean) / np.sqrt(stat.var + self.eps), -self.clip, self.clip)

    def normalize(self, nx, ex, gx):
        sn, se, sg = self.stats
        return self._norm(nx, sn), self._norm(ex, se), self._norm(gx, sg)

    def update(self, nx, ex, gx) -> None:
        for stat, x in zip(self.stats, (nx, ex, gx)):
            stat.update(x)

    def state_dict(self, prefix: str = "normalizer.") -> dict[str, np.ndarray]:
        out = {}
        for i, s in enumerate(self.stats):
            out[f"{prefix}{i}.count"] = np.array(s.count)
            out[f"{prefix}{i}.mean"] = s.mean.copy()
            out[f"{prefix}{i}.m2"] = s.m2.copy()
        return out

    def load_state_dict(self, state: dict, prefix: str = "normalizer.") -> None:
        for i, s in enumerate(self.stats):
            s.count = float(state[f"{prefix}{i}.count"])
            s.mean = np.array(state[f"{prefix}{i}.mean"], dtype=float)
            s.m2 = np.array(state[f"{prefix}{i}.m2"], dtype=float)


# -- advantages -----------------------------------------------------------

def compute_gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0, dones=None):
    """Generalized advantage estimates and returns (advantages + values).

    ``last_value`` bootstraps the step after the final reward; ``dones[t]``
    marks a terminal transition after step t, which cuts the recursion.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} are not aligned")
    d = np.zeros(len(r)) if dones is None else np.asarray(dones, dtype=float)
    adv = np.zeros(len(r))
    gae = 0.0
    for t in range(len(r) - 1, -1, -1):
        nxt = last_value if t == len(r) - 1 else v[t + 1]
        live = 1.0 - d[t]
        delta = r[t] + gamma * nxt * live - v[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    centered = adv - adv.mean()
    std = centered.std()
    # near-constant advantages carry no signal; scaling rounding noise up would invent one
    if len(adv) < 2 or std <= 1e-8 * max(1.0, float(np.abs(adv).max())):
        return np.zeros_like(adv)
    return centered / std


# -- rollout storage -----------------------------------------------------

@dataclass
class RolloutBuffer:
    """Per-sample policy data (one sample per agent and step) plus shared value observations."""

    obs: list = field(default_factory=list)  # (node_x, edge_x, global_x, senders, receivers), raw
    prev: list = field(default_factory=list)  # previous link weights fed as edge feature
    weights: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    agent: list = field(default_factory=list)
    value_index: list = field(default_factory=list)
    value_obs: list = field(default_factory=list)
    values: list = field(default_factory=list)  # value estimate per value observation
    dones: list = field(default_factory=list)  # per value observation
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    _episode_start: int = 0
    _value_start: int = 0
    _adv: list = field(default_factory=list)
    _ret: list = field(default_factory=list)

    def __len__(self):
        return len(self.obs)

    @property
    def num_steps(self) -> int:
        return len(self.value_obs)

    def start_episode(self) -> None:
        self._episode_start = len(self.obs)
        self._value_start = len(self.value_obs)

    def add_step(self, value_obs, value: float, samples, done: bool = False) -> None:
        """``samples``: per agent (obs, prev, weights, log_prob, mu, sigma, reward, agent_id)."""
        vi = len(self.value_obs)
        self.value_obs.append(value_obs)
        self.values.append(float(value))
        self.dones.append(bool(done))
        for obs, prev, w, lp, mu, sigma, r, agent in samples:
            self.obs.append(obs)
            self.prev.append(np.asarray(prev, dtype=float))
            self.weights.append(np.asarray(w, dtype=float))
            self.log_probs.append(float(lp))
            self.mu.append(np.asarray(mu, dtype=float))
            self.sigma.append(np.asarray(sigma, dtype=float))
            self.rewards.append(float(r))
            self.agent.append(int(agent))
            self.value_index.append(vi)

    def finish_episode(self, last_value: float, gamma: float, lam: float) -> None:
        """GAE per agent over the steps added since ``start_episode``."""
        lo = self._episode_start
        agents = np.asarray(self.agent[lo:])
        vidx = np.asarray(self.value_index[lo:])
        rew = np.asarray(self.rewards[lo:])
        vals = np.asarray(self.values)
        dones = np.asarray(self.dones)
        adv = np.zeros(len(agents))
        ret = np.zeros(len(agents))
        for a in np.unique(agents):
            pos = np.flatnonzero(agents == a)
            a_adv, a_ret = compute_gae(rew[pos], vals[vidx[pos]], gamma, lam, last_value, dones[vidx[pos]])
            adv[pos] = a_adv
            ret[pos] = a_ret
        self._adv.append(adv)
        self._ret.append(ret)
        self.advantages = np.concatenate(self._adv)
        self.returns = np.concatenate(self._ret)
        self._episode_start = len(self.obs)

    @classmethod
    def merge(cls, buffers: list["RolloutBuffer"]) -> "RolloutBuffer":
        out = cls()
        for b in buffers:
            if b.advantages is None or len(b.advantages) != len(b):
                raise ValueError("buffers must have advantages computed before merging")
            off = len(out.value_obs)
            for name in ("obs", "prev", "weights", "log_probs", "mu", "sigma", "rewards", "agent",
                         "value_obs", "values", "dones"):
                getattr(out, name).extend(getattr(b, name))
            out.value_index.extend(int(i) + off for i in b.value_index)
            out._adv.append(b.advantages)
            out._ret.append(b.returns)
        out.advantages = np.concatenate(out._adv) if out._adv else np.zeros(0)
        out.returns = np.concatenate(out._ret) if out._ret else np.zeros(0)
        return out


def _policy_items(obs_list, prev_list, normalizer, feed_previous: bool = True):
    items = []
    for (nx, ex, gx, s, r), prev in zip(obs_list, prev_list):
        if normalizer is not None:
            nx, ex, gx = normalizer.normalize(nx, ex, gx)
        if feed_previous:
            ex = np.concatenate([ex, prev.reshape(-1, 1)], axis=1)
        items.append((nx, ex, gx, s, r))
    return items


def _value_items(obs_list, normalizer):
    items = []
    for nx, ex, gx, s, r in obs_list:
        if normalizer is not None:
            nx, ex, gx = normalizer.normalize(nx, ex, gx)
        items.append((nx, ex, gx, s, r))
    return items


def raw_arrays(graph):
    return graph.node_features, graph.edge_features, graph.global_features, graph.senders, graph.receivers


# -- learner state ---------------------------------------------------------

class Temperature(Module):
    """Entropy temperature alpha = softplus(rho)."""

    def __init__(self, init_alpha: float = 0.01):
        super().__init__()
        self.rho = self.param("rho", np.array([math.log(math.expm1(init_alpha))]))

    @property
    def alpha(self) -> float:
        return float(np.logaddexp(0.0, self.rho.data[0]))

    def loss(self, entropy_mean: float, target: float) -> Tensor:
        """alpha * (H - target): minimizing raises alpha while entropy is below target."""
        return ad.mul(ad.softplus(self.rho), float(entropy_mean - target))


class Learner:
    """Policy, value function, temperature and their optimizers."""

    def __init__(self, mpn: MpnConfig | None = None, ppo: PPOConfig | None = None, seed: int = 0):
        self.mpn_cfg = mpn or MpnConfig()
        self.cfg = ppo or PPOConfig()
        self.policy = LoggiaPolicy(self.mpn_cfg, seed)
        self.value = ValueFunction(replace(self.mpn_cfg, feed_previous_weights=False), seed)
        self.temperature = Temperature(self.cfg.init_alpha)
        self.normalizer = RunningNormalizer()
        self.opt_policy = Adam(self.policy.parameters(), self.cfg.lr_policy)
        self.opt_value = Adam(self.value.parameters(), self.cfg.lr_value)
        self.opt_temperature = Adam(self.temperature.parameters(), self.cfg.lr_temperature)
        self.opt_il = Adam(self.policy.parameters(), self.cfg.il_lr)

    def modules(self) -> dict:
        return {"policy": self.policy, "value": self.value, "temperature": self.temperature}

    def optimizers(self) -> dict:
        return {"opt_policy": self.opt_policy, "opt_value": self.opt_value,
                "opt_temperature": self.opt_temperature, "opt_il": self.opt_il}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.modules().items():
            out.update({f"{name}.{k}": v for k, v in m.state_dict().items()})
        for name, opt in self.optimizers().items():
            out.update({f"{name}.{k}": v for k, v in opt.state_dict().items()})
        out.update(self.normalizer.state_dict())
        return out

    def load_state_dict(self, state: dict) -> None:
        for name, m in self.modules().items():
            m.load_state_dict({k[len(name) + 1:]: v for k, v in state.items() if k.startswith(name + ".")})
        for name, opt in self.optimizers().items():
            opt.load_state_dict({k[len(name) + 1:]: v for k, v in state.items() if k.startswith(name + ".")})
        self.normalizer.load_state_dict(state)

    def values_of(self, obs_list) -> np.ndarray:
        if not obs_list:
            return np.zeros(0)
        return self.value(batch_arrays(_value_items(obs_list, self.normalizer))).data.copy()


def _check_finite(name: str, value: float, **context) -> None:
    if not np.isfinite(value):
        detail = ", ".join(f"{k}={v}" for k, v in context.items())
        raise FloatingPointError(f"non-finite {name} ({value}); {detail}")


def _minibatches(n: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [b for b in np.array_split(rng.permutation(n), min(count, n)) if len(b)]


def ppo_update(buffer: RolloutBuffer, learner: Learner, config: PPOConfig | None = None,
               rng: np.random.Generator | None = None, on_epoch_end=None) -> dict:
    """Clipped-surrogate policy update with entropy temperature, clipped value loss and early stopping.

    After every epoch the mean clip fraction and mean KL(old || new) are
    checked; exceeding either stops policy and temperature updates for the
    remaining epochs while value epochs continue.
    """
    cfg = config or learner.cfg
    rng = rng or np.random.default_rng(0)
    n = len(buffer)
    if n == 0 or buffer.advantages is None or len(buffer.advantages) != n:
        raise ValueError("buffer incomplete: advantages must be computed for every sample")
    policy, value, temp, norm = learner.policy, learner.value, learner.temperature, learner.normalizer
    feed = policy.cfg.feed_previous_weights
    log_space = policy.cfg.log_space
    adv_all = np.asarray(buffer.advantages)
    ret_all = np.asarray(buffer.returns)
    vidx_all = np.asarray(buffer.value_index)
    v_old_all = np.asarray(buffer.values)[vidx_all]
    logp_old_all = np.asarray(buffer.log_probs)
    policy_active = True
    stopped_epoch = None
    history = []
    for epoch in range(cfg.epochs):
        ep = {"policy_loss": [], "value_loss": [], "entropy": [], "kl": [], "clip_fraction": [],
              "alpha": [], "temperature_loss": []}
        for mb in _minibatches(n, cfg.minibatches, rng):
            if policy_active:
                batch = batch_arrays(_policy_items([buffer.obs[i] for i in mb], [buffer.prev[i] for i in mb],
                                                   norm, feed))
                mu, sigma = policy(batch)
                w = np.concatenate([buffer.weights[i] for i in mb])
                logp = log_prob(mu, sigma, w, batch.edges_by_graph, log_space)
                ratio = ad.exp(logp - logp_old_all[mb])
                adv = normalize_advantages(adv_all[mb])
                surr = ad.minimum(ad.mul(ratio, adv),
                                  ad.mul(ad.clip(ratio, 1.0 - cfg.clip_policy, 1.0 + cfg.clip_policy), adv))
                ent = entropy(mu, sigma, batch.edges_by_graph, cfg.entropy_include_mu)
                alpha = temp.alpha
                loss = ad.neg(ad.mean(surr)) - ad.mul(ad.mean(ent), alpha)
                _check_finite("policy loss", loss.item(), epoch=epoch, alpha=alpha,
                              max_ratio=float(ratio.data.max()))
                policy.zero_grad()
                loss.backward()
                clip_grad_norm(policy.parameters(), cfg.grad_clip)
                learner.opt_policy.step()
                # temperature: per-sample target is H_targ times that sample's edge count
                n_edges = np.array([len(buffer.weights[i]) for i in mb], dtype=float)
                h_mean = float(ent.data.mean())
                t_loss = temp.loss(h_mean, float(cfg.target_entropy * n_edges.mean()))
                temp.zero_grad()
                t_loss.backward()
                learner.opt_temperature.step()
                ratio_np = ratio.data
                mu_old = np.concatenate([buffer.mu[i] for i in mb])
                sigma_old = np.concatenate([buffer.sigma[i] for i in mb])
                kl_edges = kl_normal(mu_old, sigma_old, mu.data, sigma.data)
                kl = float(np.bincount(batch.edge_graph, kl_edges, len(mb)).mean())
                ep["policy_loss"].append(loss.item())
                ep["entropy"].append(h_mean)
                ep["kl"].append(kl)
                ep["clip_fraction"].append(float(np.mean(np.abs(ratio_np - 1.0) > cfg.clip_policy)))
                ep["alpha"].append(alpha)
                ep["temperature_loss"].append(t_loss.item())
            # value
            uniq, inv = np.unique(vidx_all[mb], return_inverse=True)
            vbatch = batch_arrays(_value_items([buffer.value_obs[i] for i in uniq], norm))
            v = ad.gather(value(vbatch), inv)
            v_old, ret = v_old_all[mb], ret_all[mb]
            v_clip = ad.clip(v - v_old, -cfg.clip_value, cfg.clip_value) + v_old
            vloss = ad.mul(ad.mean(ad.maximum(ad.square(v - ret), ad.square(v_clip - ret))), 0.5)
            _check_finite("value loss", vloss.item(), epoch=epoch)
            value.zero_grad()
            vloss.backward()
            clip_grad_norm(value.parameters(), cfg.grad_clip)
            learner.opt_value.step()
            ep["value_loss"].append(vloss.item())
        summary = {k: float(np.mean(v)) if v else None for k, v in ep.items()}
        summary["epoch"] = epoch
        summary["policy_active"] = policy_active
        history.append(summary)
        if policy_active and (summary["clip_fraction"] > cfg.max_clip_fraction or summary["kl"] > cfg.max_kl):
            policy_active = False
            stopped_epoch = epoch
        if on_epoch_end is not None:
            on_epoch_end(epoch, summary, learner)
    first = history[0]
    last_active = [h for h in history if h["policy_active"]][-1]
    return {
        "policy_loss": last_active["policy_loss"], "value_loss": history[-1]["value_loss"],
        "entropy": last_active["entropy"], "kl": last_active["kl"],
        "clip_fraction": last_active["clip_fraction"], "alpha": learner.temperature.alpha,
        "early_stop_epoch": stopped_epoch, "initial_kl": first["kl"], "epochs": history,
    }


def mappo_update(buffers, learner: Learner, config: PPOConfig | None = None,
                 rng: np.random.Generator | None = None, on_epoch_end=None) -> dict:
    """Shared-parameter update over the pooled samples of all agents.

    Each agent's graph (with its is-self flag) is one sample; all agents of
    a step share the centralized value estimate of that step.
    """
    buffer = buffers if isinstance(buffers, RolloutBuffer) else RolloutBuffer.merge(list(buffers))
    return ppo_update(buffer, learner, config, rng, on_epoch_end)


# -- imitation --------------------------------------------------------------

def normalized_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w / w.mean()


def il_loss_np(student: np.ndarray, expert: np.ndarray) -> float:
    return float(np.mean((normalized_weights(student) - normalized_weights(expert)) ** 2))


def il_loss(mu: Tensor, expert: np.ndarray, edges_by_graph, log_space: bool = True) -> Tensor:
    """Mean over graphs of the MSE between mean-normalized student and expert weights."""
    w = ad.exp(mu) if log_space else ad.softplus(mu) + 1e-4
    w_norm = ad.div(w, ad.gather(ad.segment_mean(w, edges_by_graph), edges_by_graph.index))
    e = np.asarray(expert, dtype=float)
    counts = np.bincount(edges_by_graph.index, minlength=edges_by_graph.num).astype(float)
    e_norm = e / (np.bincount(edges_by_graph.index, e, edges_by_graph.num) / counts)[edges_by_graph.index]
    per_graph = ad.segment_mean(ad.square(w_norm - e_norm), edges_by_graph)
    return ad.mean(per_graph)


@dataclass
class ImitationSet:
    obs: list = field(default_factory=list)
    prev: list = field(default_factory=list)
    expert: list = field(default_factory=list)

    def __len__(self):
        return len(self.obs)

    def add(self, obs, prev, expert) -> None:
        self.obs.append(obs)
        self.prev.append(np.asarray(prev, dtype=float))
        self.expert.append(np.asarray(expert, dtype=float))


def imitation_loss(data: ImitationSet, learner: Learner, chunk: int = 2048) -> float:
    """Loss of the current student on ``data`` without updating."""
    total, count = 0.0, 0
    feed = learner.policy.cfg.feed_previous_weights
    for lo in range(0, len(data), chunk):
        idx = range(lo, min(lo + chunk, len(data)))
        batch = batch_arrays(_policy_items([data.obs[i] for i in idx], [data.prev[i] for i in idx],
                                           learner.normalizer, feed))
        mu, _ = learner.policy(batch)
        loss = il_loss(mu, np.concatenate([data.expert[i] for i in idx]), batch.edges_by_graph,
                       learner.policy.cfg.log_space)
        total += loss.item() * len(idx)
        count += len(idx)
    return total / max(count, 1)


def supervised_update(data: ImitationSet, learner: Learner, epochs: int, minibatches: int,
                      rng: np.random.Generator, optimizer: Adam | None = None) -> dict:
    """Minimize the imitation loss over ``data``; shared by IL and BC."""
    if len(data) == 0:
        raise ValueError("empty imitation dataset")
    opt = optimizer or learner.opt_il
    policy = learner.policy
    feed = policy.cfg.feed_previous_weights
    losses = []
    for epoch in range(epochs):
        for mb in _minibatches(len(data), minibatches, rng):
            batch = batch_arrays(_policy_items([data.obs[i] for i in mb], [data.prev[i] for i in mb],
                                               learner.normalizer, feed))
            mu, _ = policy(batch)
            loss = il_loss(mu, np.concatenate([data.expert[i] for i in mb]), batch.edges_by_graph,
                           policy.cfg.log_space)
            _check_finite("imitation loss", loss.item(), epoch=epoch)
            policy.zero_grad()
            loss.backward()
            clip_grad_norm(policy.parameters(), learner.cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
    return {"loss_first": losses[0], "loss_last": losses[-1], "loss_mean": float(np.mean(losses)),
            "steps": len(losses)}


def bc_dataset(topologies, metric: str = "EIGRP", repeats: int = 1) -> ImitationSet:
    """Zero-utilization observations from every observer placement, paired with expert weights."""
    data = ImitationSet()
    for _ in range(repeats):
        for topo in topologies:
            tel = Telemetry(topo)
            tel.record_idle(0)
            expert = sp_baseline(topo, metric)
            observers = [BIRDSEYE, tel.central] + list(range(topo.num_nodes))
            for obs in observers:
                g = tel.assemble(obs)
                data.add(raw_arrays(g), np.zeros(g.num_edges), expert)
    return data


def bc_update(data: ImitationSet, learner: Learner, epochs: int = 10, minibatches: int = 16,
              rng: np.random.Generator | None = None) -> dict:
    return supervised_update(data, learner, epochs, minibatches, rng or np.random.default_rng(0))


# -- rollouts -----------------------------------------------------------------

def collect_rollout(learner: Learner, env: RoutingEnv, topo: Topology, schedule, rng: np.random.Generator,
                    buffer: RolloutBuffer, raw_store: list, synthetic_inference_ms=None) -> dict:
    """One exploring episode appended to ``buffer``; raw policy features go to ``raw_store``."""
    agent = PolicyAgent(learner.policy, learner.normalizer, synthetic_inference_ms)
    cfg = learner.cfg
    result = env.reset(topo, schedule)
    buffer.start_episode()
    multi = env.config.multi
    reward_sum = 0.0
    while not result.done:
        vobs = raw_arrays(result.value_observation)
        prev = agent.prev if agent.prev is not None else [np.zeros(g.num_edges) for g in result.observations]
        d = agent.decide(topo, result, multi, True, rng)
        v = float(learner.values_of([vobs])[0])
        obs = [raw_arrays(g) for g in result.observations]
        raw_store.extend(obs)
        result = env.step(d.action, d.inference_ms)
        rewards = np.atleast_1d(result.reward)
        agents = env.agents
        samples = [(obs[i], prev[i], d.weights[i], d.log_probs[i], d.mu[i], d.sigma[i], rewards[i], agents[i])
                   for i in range(len(obs))]
        buffer.add_step(vobs, v, samples)
        reward_sum += float(rewards.mean())
    last = float(learner.values_of([raw_arrays(result.value_observation)])[0])
    buffer.finish_episode(last, cfg.gamma, cfg.gae_lambda)
    return {**env.episode.summary(), "reward": reward_sum}


def collect_imitation(learner: Learner, env: RoutingEnv, topo: Topology, schedule, data: ImitationSet,
                      raw_store: list, expert_metric: str = "EIGRP", synthetic_inference_ms=None) -> dict:
    """Student acts deterministically; the expert's weights label every visited observation."""
    agent = PolicyAgent(learner.policy, learner.normalizer, synthetic_inference_ms)
    expert = sp_baseline(topo, expert_metric)
    result = env.reset(topo, schedule)
    multi = env.config.multi
    while not result.done:
        prev = agent.prev if agent.prev is not None else [np.zeros(g.num_edges) for g in result.observations]
        d = agent.decide(topo, result, multi, False)
        for g, p in zip(result.observations, prev):
            obs = raw_arrays(g)
            data.add(obs, p, expert)
            raw_store.append(obs)
        result = env.step(d.action, d.inference_ms)
    return env.episode.summary()


# -- protocol -------------------------------------------------------------------

@dataclass
class TrainConfig:
    topology: str = "mini5"
    seed: int = 0
    intensity: float | None = None  # None: calibrate per topology
    episodes: int = 16
    topologies_per_iteration: int = 4  # generated presets: topologies x sequences = episodes
    il_iterations: int = 10
    rl_iterations: int = 10
    bc_iterations: int = 0
    bc_repeats: int = 10
    algorithm: str = "mappo"  # "mappo" or "ppo"
    train_mode: str | None = None  # None: Central-Multi for mappo, Central-Single for ppo
    expert: str = "EIGRP"
    steps: int = 400
    step_ms: float = 5.0
    lambda_ac: float = 0.2
    lambda_r: float | None = None
    synthetic_inference_ms: float | None = None  # None: measured wall-clock
    mpn: MpnConfig = field(default_factory=MpnConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def __post_init__(self):
        if isinstance(self.mpn, dict):
            self.mpn = MpnConfig(**self.mpn)
        if isinstance(self.ppo, dict):
            self.ppo = PPOConfig(**self.ppo)
        if self.algorithm not in ("mappo", "ppo"):
            raise ValueError(f"algorithm: expected 'mappo' or 'ppo', got {self.algorithm!r}")
        if min(self.il_iterations, self.rl_iterations, self.bc_iterations) < 0 or self.episodes < 1:
            raise ValueError("iteration counts must be >= 0 and episodes >= 1")
        self.env_config()  # validates mode and horizon

    @property
    def mode(self) -> str:
        if self.train_mode:
            return self.train_mode
        return "Central-Multi" if self.algorithm == "mappo" else "Central-Single"

    @property
    def total_iterations(self) -> int:
        return self.bc_iterations + self.il_iterations + self.rl_iterations

    def env_config(self, mode: str | None = None) -> EnvConfig:
        return EnvConfig(steps=self.steps, step_ms=self.step_ms, mode=mode or self.mode,
                         lambda_ac=self.lambda_ac, lambda_r=self.lambda_r)

    def phase(self, iteration: int) -> str:
        if iteration < self.bc_iterations:
            return "bc"
        if iteration < self.bc_iterations + self.il_iterations:
            return "il"
        return self.algorithm

    def to_dict(self) -> dict:
        return asdict(self)


def environment_steps(config: TrainConfig) -> int:
    return (config.il_iterations + config.rl_iterations) * config.episodes * config.steps


def is_generated(preset: str) -> bool:
    return preset.startswith("nx-")


def training_episodes(config: TrainConfig, iteration: int) -> list[tuple[int, int]]:
    """(topology seed, traffic seed) per episode of an iteration."""
    rng = np.random.default_rng([config.seed, iteration, 11])
    if is_generated(config.topology):
        k = config.topologies_per_iteration
        per = max(1, config.episodes // k)
        topo_seeds = rng.integers(0, EVAL_SEED_BASE, size=k)
        out = []
        for i in range(config.episodes):
            out.append((int(topo_seeds[min(i // per, k - 1)]), int(rng.integers(0, EVAL_SEED_BASE))))
        return out
    return [(config.seed, int(s)) for s in rng.integers(0, EVAL_SEED_BASE, size=config.episodes)]


def held_out_seeds(count: int, base: int = EVAL_SEED_BASE) -> list[int]:
    return [base + k for k in range(count)]


class Trainer:
    """Iteration loop with checkpoints, JSONL log and resume."""

    def __init__(self, config: TrainConfig, out_dir=None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.learner = Learner(config.mpn, config.ppo, config.seed)
        self.iteration = 0
        self.intensity: dict[str, float] = {}
        self._topos: dict[int, Topology] = {}

    # topology and traffic resolution is cached; both are pure functions of their seeds
    def topology(self, seed: int) -> Topology:
        if seed not in self._topos:
            self._topos[seed] = resolve_topology(self.config.topology, seed)
        return self._topos[seed]

    def intensity_for(self, topo_seed: int) -> float:
        if self.config.intensity is not None:
            return float(self.config.intensity)
        key = str(topo_seed)
        if key not in self.intensity:
            self.intensity[key] = calibrate_intensity(self.topology(topo_seed), self.config.seed)
        return self.intensity[key]

    def schedule(self, topo_seed: int, traffic_seed: int):
        topo = self.topology(topo_seed)
        return generate_schedule(topo, traffic_seed, self.intensity_for(topo_seed),
                                 self.config.steps * self.config.step_ms)

    def checkpoint_path(self, iteration: int) -> Path:
        return self.out_dir / "checkpoints" / f"iter_{iteration:03d}.ckpt"

    def save(self, iteration: int, record: dict) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.checkpoint_path(iteration)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"iteration": iteration, "phase": record["phase"], "config": self.config.to_dict(),
                "intensity": self.intensity, "manifest": self.learner.policy.manifest()}
        save_arrays(path, self.learner.state_dict(), meta)
        return path

    def resume(self) -> bool:
        """Load the newest checkpoint in ``out_dir``; returns whether one was found."""
        if self.out_dir is None:
            return False
        ckpts = sorted((self.out_dir / "checkpoints").glob("iter_*.ckpt"))
        if not ckpts:
            return False
        arrays, meta = load_arrays(ckpts[-1])
        self.learner.load_state_dict(arrays)
        self.intensity = dict(meta.get("intensity", {}))
        self.iteration = int(meta["iteration"]) + 1
        return True

    def run_iteration(self, iteration: int, timed: bool = True) -> dict:
        cfg = self.config
        phase = cfg.phase(iteration)
        learner = self.learner
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, iteration])
        raw: list = []
        record = {"iteration": iteration, "phase": phase}
        if phase == "bc":
            topos = [self.topology(s) for s, _ in training_episodes(cfg, iteration)]
            uniq = list({id(t): t for t in topos}.values())
            data = bc_dataset(uniq, cfg.expert, cfg.bc_repeats)
            raw.extend(data.obs)
            record["loss_before"] = imitation_loss(data, learner)
            stats = supervised_update(data, learner, cfg.ppo.il_epochs, cfg.ppo.il_minibatches, rng)
            record["loss_after"] = imitation_loss(data, learner)
            record.update({k: stats[k] for k in ("loss_first", "loss_last", "loss_mean")})
        elif phase == "il":
            data = ImitationSet()
            episodes = []
            env = RoutingEnv(cfg.env_config())
            for topo_seed, traffic_seed in training_episodes(cfg, iteration):
                topo = self.topology(topo_seed)
                episodes.append(collect_imitation(learner, env, topo, self.schedule(topo_seed, traffic_seed),
                                                  data, raw, cfg.expert, cfg.synthetic_inference_ms))
            record["loss_before"] = imitation_loss(data, learner)
            stats = supervised_update(data, learner, cfg.ppo.il_epochs, cfg.ppo.il_minibatches, rng)
            record["loss_after"] = imitation_loss(data, learner)
            record.update({k: stats[k] for k in ("loss_first", "loss_last", "loss_mean")})
            record["delivered_mb"] = float(np.mean([e["delivered_mb"] for e in episodes]))
        else:
            buffer = RolloutBuffer()
            episodes = []
            env = RoutingEnv(cfg.env_config())
            for topo_seed, traffic_seed in training_episodes(cfg, iteration):
                topo = self.topology(topo_seed)
                episodes.append(collect_rollout(learner, env, topo, self.schedule(topo_seed, traffic_seed), rng,
                                                buffer, raw, cfg.synthetic_inference_ms))
            update = mappo_update if phase == "mappo" else ppo_update
            stats = update(buffer, learner, cfg.ppo, rng)
            record.update({k: v for k, v in stats.items() if k != "epochs"})
            record["mean_reward"] = float(np.mean([e["reward"] for e in episodes]))
            record["delivered_mb"] = float(np.mean([e["delivered_mb"] for e in episodes]))
        # statistics stay frozen during collection and update, then absorb this iteration's data
        if raw:
            learner.normalizer.update(np.concatenate([o[0] for o in raw]), np.concatenate([o[1] for o in raw]),
                                      np.stack([o[2] for o in raw]))
        if timed:
            record["seconds"] = round(time.perf_counter() - t0, 3)
        return record

    def run(self, iterations: int | None = None, timed: bool = False) -> list[dict]:
        """Train until ``iterations`` (default: all phases) are done, resuming where possible."""
        total = self.config.total_iterations if iterations is None else iterations
        log_path = self.out_dir / "metrics.jsonl" if self.out_dir is not None else None
        records = []
        while self.iteration < total:
            rec = self.run_iteration(self.iteration, timed)
            self.save(self.iteration, rec)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
            log.info("iteration %d (%s): %s", self.iteration, rec["phase"],
                     {k: v for k, v in rec.items() if isinstance(v, float)})
            records.append(rec)
            self.iteration += 1
        return records


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def train_protocol(config: TrainConfig, out_dir=None, resume: bool = True, timed: bool = False) -> Trainer:
    trainer = Trainer(config, out_dir)
    if resume:
        trainer.resume()
    trainer.run(timed=timed)
    return trainer


def load_policy(path) -> tuple[LoggiaPolicy, RunningNormalizer, dict]:
    """Policy and observation normalizer from a training checkpoint."""
    arrays, meta = load_arrays(path)
    cfg = MpnConfig(**meta["manifest"]["mpn_config"])
    policy = LoggiaPolicy(cfg)
    policy.load_state_dict({k[len("policy."):]: v for k, v in arrays.items() if k.startswith("policy.")})
    norm = RunningNormalizer()
    norm.load_state_dict(arrays)
    return policy, norm, meta
