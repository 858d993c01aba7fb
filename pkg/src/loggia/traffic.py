"""Seeded flow schedules: a mix of TCP bulk transfers and constant-bitrate UDP flows."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .topology import Topology

TCP, UDP = "TCP", "UDP"
TCP_SHARE = 0.8
# flows per second per router at intensity 1.0
BASE_RATE_PER_NODE = 30.0
TCP_MEDIAN_BYTES = 100_000
TCP_SIGMA_LOG = 1.0
TCP_SIZE_RANGE = (1_000, 20_000_000)
UDP_RATE_RANGE = (1.0, 20.0)  # Mbps
UDP_DURATION_RANGE = (50.0, 500.0)  # ms
CALIBRATION_GRID = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)

SCHEDULE_FORMAT = "loggia-schedule"


@dataclass(frozen=True)
class Flow:
    id: int
    src: int
    dst: int
    protocol: str
    start_ms: float
    size_bytes: int = 0
    bitrate_mbps: float = 0.0
    duration_ms: float = 0.0

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"flow {self.id}: src == dst")
        if self.protocol == TCP and self.size_bytes <= 0:
            raise ValueError(f"flow {self.id}: TCP size must be positive")
        if self.protocol == UDP and (self.bitrate_mbps <= 0 or self.duration_ms <= 0):
            raise ValueError(f"flow {self.id}: UDP bitrate and duration must be positive")
        if self.protocol not in (TCP, UDP):
            raise ValueError(f"flow {self.id}: unknown protocol {self.protocol!r}")

    @property
    def offered_bytes(self) -> float:
        if self.protocol == TCP:
            return float(self.size_bytes)
        return self.bitrate_mbps * self.duration_ms * 1e3 / 8.0


@dataclass
class FlowSchedule:
    flows: list[Flow]
    seed: int
    intensity: float
    horizon_ms: float
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.flows)

    @property
    def udp_offered_bytes(self) -> float:
        return sum(f.offered_bytes for f in self.flows if f.protocol == UDP)


def generate_schedule(topo: Topology, seed: int, intensity: float = 1.0,
                      horizon_ms: float = 2000.0) -> FlowSchedule:
    """Poisson flow arrivals over ``[0, horizon_ms)``; inter-arrivals shrink as 1/intensity."""
    if intensity <= 0:
        raise ValueError("intensity must be positive")
    if horizon_ms <= 0:
        raise ValueError("horizon_ms must be positive")
    n = topo.num_nodes
    rng = np.random.default_rng([seed, n])
    mean_gap_ms = 1000.0 / (BASE_RATE_PER_NODE * n)
    flows = []
    t = 0.0
    while True:
        t += rng.exponential(mean_gap_ms) / intensity
        if t >= horizon_ms:
            break
        src = int(rng.integers(n))
        dst = int(rng.integers(n - 1))
        dst += dst >= src
        start = round(t, 3)
        if rng.random() < TCP_SHARE:
            size = rng.lognormal(np.log(TCP_MEDIAN_BYTES), TCP_SIGMA_LOG)
            size = int(np.clip(round(size), *TCP_SIZE_RANGE))
            flows.append(Flow(len(flows), src, dst, TCP, start, size_bytes=size))
        else:
            rate = round(float(rng.uniform(*UDP_RATE_RANGE)), 3)
            dur = round(float(rng.uniform(*UDP_DURATION_RANGE)), 3)
            flows.append(Flow(len(flows), src, dst, UDP, start, bitrate_mbps=rate, duration_ms=dur))
    return FlowSchedule(flows, seed, float(intensity), float(horizon_ms))


def schedule_to_dict(schedule: FlowSchedule) -> dict:
    return {
        "format": SCHEDULE_FORMAT,
        "version": 1,
        "seed": schedule.seed,
        "intensity": schedule.intensity,
        "horizon_ms": schedule.horizon_ms,
        "flows": [asdict(f) for f in schedule.flows],
    }


def schedule_from_dict(doc: dict) -> FlowSchedule:
    if doc.get("format") != SCHEDULE_FORMAT:
        raise ValueError(f"format: expected {SCHEDULE_FORMAT!r}")
    flows = [Flow(**f) for f in doc["flows"]]
    starts = [f.start_ms for f in flows]
    if starts != sorted(starts):
        raise ValueError("flows: not sorted by start time")
    return FlowSchedule(flows, int(doc["seed"]), float(doc["intensity"]), float(doc["horizon_ms"]))


def save_schedule(schedule: FlowSchedule, path) -> None:
    Path(path).write_text(json.dumps(schedule_to_dict(schedule), indent=1) + "\n")


def load_schedule(path) -> FlowSchedule:
    return schedule_from_dict(json.loads(Path(path).read_text()))


def calibrate_intensity(topo: Topology, seed: int, target: str = "drops-under-static",
                        base: float = 1.0, horizon_ms: float = 2000.0,
                        step_ms: float = 5.0, grid=CALIBRATION_GRID) -> float:
    """Smallest grid intensity at which static EIGRP shortest paths drop traffic."""
    if target != "drops-under-static":
        raise ValueError(f"unknown calibration target {target!r}")
    from .env import run_static_episode

    for factor in grid:
        intensity = factor * base
        schedule = generate_schedule(topo, seed, intensity, horizon_ms)
        metrics = run_static_episode(topo, schedule, "EIGRP", horizon_ms=horizon_ms, step_ms=step_ms)
        if metrics["dropped_mb"] > 0:
            return intensity
    raise RuntimeError(
        f"no drops under static routing for intensities {grid[0] * base}..{grid[-1] * base}")
