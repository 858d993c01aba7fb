"""Deterministic discrete-event packet simulator.

Store-and-forward links with drop-tail send buffers, destination-based
forwarding tables with timed row installation, a windowed TCP-lite sender
and constant-bitrate UDP sources. The clock is integer microseconds.

Each directed link keeps a ``busy_until`` timestamp: a packet accepted into
the send buffer is assigned its transmission start immediately, so the
buffer holds exactly the accepted packets whose start lies in the future.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .routing import RoutingAction, link_delay_us, shortest_delays_us
from .topology import Topology
from .traffic import TCP, FlowSchedule

MSS = 1500
TCP_MAX_WINDOW = 64
TCP_INITIAL_WINDOW = 10
REORDER_WINDOW = 64
MIN_RTO_US = 1000
MAX_BACKOFF = 64

DELIVER, DROP, LOOP, DISCARD = "deliver", "drop", "loop", "discard"

# event kinds; installs sort before everything else at the same instant
_INSTALL, _ARRIVE, _START, _UDP, _ACK, _TIMEOUT = range(6)


class ForwardingError(ValueError):
    pass


class TerminalEvent(NamedTuple):
    kind: str
    flow: int
    src: int
    dst: int
    nbytes: int
    time_us: int
    sent_us: int
    path: tuple

    @property
    def forwarders(self) -> tuple:
        """Nodes that made a forwarding decision for this packet, oldest first.

        A dropped packet's last node chose the congested (or looping) next hop;
        delivered and discarded packets end at the destination, which did not.
        """
        return self.path if self.kind in (DROP, LOOP) else self.path[:-1]


@dataclass
class StepTrace:
    t_start_us: int
    t_end_us: int
    events: list
    node_tx: np.ndarray  # [src, dst] bytes injected
    node_rx: np.ndarray  # [dst, src] bytes accepted
    node_drop: np.ndarray
    node_discard: np.ndarray
    edge_tx: np.ndarray
    edge_rx: np.ndarray
    edge_drop: np.ndarray
    edge_queue: np.ndarray  # bytes waiting at step end
    edge_queue_integral: np.ndarray  # byte * microseconds waited during the step

    @property
    def duration_us(self) -> int:
        return self.t_end_us - self.t_start_us

    def bytes_of(self, *kinds) -> int:
        return sum(e.nbytes for e in self.events if e.kind in kinds)

    @property
    def delivered_bytes(self) -> int:
        return self.bytes_of(DELIVER)

    @property
    def dropped_bytes(self) -> int:
        return self.bytes_of(DROP, LOOP)

    @property
    def discarded_bytes(self) -> int:
        return self.bytes_of(DISCARD)

    def to_records(self) -> list[dict]:
        return [dict(e._asdict(), path=list(e.path)) for e in self.events]


class _Packet:
    __slots__ = ("flow", "seq", "size", "src", "dst", "sent", "path", "retx")

    def __init__(self, flow, seq, size, src, dst, sent, retx):
        self.flow, self.seq, self.size = flow, seq, size
        self.src, self.dst, self.sent, self.retx = src, dst, sent, retx
        self.path = [src]


class _Tcp:
    __slots__ = ("nseg", "last_size", "una", "next_seq", "cwnd", "dupacks", "recover",
                 "srtt", "backoff", "token", "done", "expected", "ooo", "app_log")

    def __init__(self, size, srtt):
        self.nseg = max(1, math.ceil(size / MSS))
        self.last_size = size - MSS * (self.nseg - 1)
        self.una = self.next_seq = 0
        self.cwnd = float(TCP_INITIAL_WINDOW)
        self.dupacks = 0
        self.recover = 0
        self.srtt = srtt
        self.backoff = 1
        self.token = 0
        self.done = False
        # receiver side
        self.expected = 0
        self.ooo = set()
        self.app_log = []

    def seg_size(self, seq):
        return self.last_size if seq == self.nseg - 1 else MSS


@dataclass
class FlowCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    discarded: int = 0


class Simulator:
    """Packet-level network simulator over a fixed topology and flow schedule."""

    def __init__(self, topo: Topology, schedule: FlowSchedule | None = None,
                 forwarding: RoutingAction | np.ndarray | None = None, log_app_stream: bool = False):
        self.topo = topo
        n = topo.num_nodes
        self.n = n
        self.edges = topo.edges
        self.eid = [[-1] * n for _ in range(n)]
        for i, (u, v) in enumerate(self.edges):
            self.eid[u][v] = i
        ne = len(self.edges)
        self.prop = [link_delay_us(topo, u, v) for u, v in self.edges]
        # microseconds per byte = 8 / Mbps
        self.us_per_byte = [8.0 / topo.datarate(u, v) for u, v in self.edges]
        self.buffer = [topo.buffer_bytes(u, v) for u, v in self.edges]
        self.busy = [0] * ne
        self.queues = [deque() for _ in range(ne)]
        self.qbytes = [0] * ne
        self.loop_limit = 4 * n
        self.ack_delay = shortest_delays_us(topo).tolist()
        self.log_app_stream = log_app_stream

        self.table = [[-1] * n for _ in range(n)]
        if forwarding is None:
            raise ValueError("initial forwarding table required")
        table = forwarding.next_hop if isinstance(forwarding, RoutingAction) else np.asarray(forwarding)
        for u in range(n):
            self._set_row(u, {z: int(table[u][z]) for z in range(n) if z != u})

        self.now = 0
        self._seq = 0
        self._heap = []
        self.flows = list(schedule.flows) if schedule is not None else []
        self.counters = [FlowCounters() for _ in self.flows]
        self.tcp = {}
        for i, f in enumerate(self.flows):
            self._push(int(round(f.start_ms * 1000)), _START, i, None)
        self._reset_step(0, 0)

    # -- event plumbing -------------------------------------------------
    def _push(self, t, kind, a, b):
        self._seq += 1
        heapq.heappush(self._heap, (t, 0 if kind == _INSTALL else 1, self._seq, kind, a, b))

    def _reset_step(self, t0, t1):
        n, ne = self.n, len(self.edges)
        self._events = []
        self._node_tx = [[0] * n for _ in range(n)]
        self._node_rx = [[0] * n for _ in range(n)]
        self._node_drop = [0] * n
        self._node_discard = [0] * n
        self._edge_tx = [0] * ne
        self._edge_rx = [0] * ne
        self._edge_drop = [0] * ne
        self._integral = [0.0] * ne
        self._t0, self._t1 = t0, t1

    def _drain(self, e):
        q = self.queues[e]
        now = self.now
        while q and q[0][0] <= now:
            self.qbytes[e] -= q.popleft()[1]

    # -- forwarding -----------------------------------------------------
    def _set_row(self, u, row):
        for z, v in row.items():
            if z == u:
                continue
            if not self.topo.has_link(u, v):
                raise ForwardingError(f"node {u}: next hop {v} for destination {z} is not a neighbor")
            self.table[u][z] = v

    def install_forwarding(self, u: int, rows, at_time_ms: float) -> None:
        """Schedule row updates for router ``u``; they apply to packets forwarded at or after ``at_time_ms``."""
        at = int(round(at_time_ms * 1000))
        if at < self.now:
            raise ValueError(f"install time {at_time_ms} ms lies before current time {self.now / 1000} ms")
        if not isinstance(rows, dict):
            rows = {z: int(v) for z, v in enumerate(rows) if z != u}
        rows = {int(z): int(v) for z, v in rows.items() if int(z) != u}
        for z, v in rows.items():
            if not 0 <= z < self.n:
                raise ForwardingError(f"node {u}: invalid destination {z}")
            if not self.topo.has_link(u, v):
                raise ForwardingError(f"node {u}: next hop {v} for destination {z} is not a neighbor")
        self._push(at, _INSTALL, u, rows)

    def next_hop(self, u: int, z: int) -> int:
        return self.table[u][z]

    def _terminal(self, kind, p, node):
        ev = TerminalEvent(kind, p.flow, p.src, p.dst, p.size, self.now, p.sent, tuple(p.path))
        self._events.append(ev)
        c = self.counters[p.flow] if p.flow >= 0 else None
        if kind == DELIVER:
            if c:
                c.delivered += p.size
            self._node_rx[node][p.src] += p.size
        elif kind == DISCARD:
            if c:
                c.discarded += p.size
            self._node_discard[node] += p.size
        else:
            if c:
                c.dropped += p.size
            self._node_drop[node] += p.size

    def _forward(self, p, x):
        if len(p.path) - 1 >= self.loop_limit:
            self._terminal(LOOP, p, x)
            return
        nh = self.table[x][p.dst]
        e = self.eid[x][nh]
        now = self.now
        q = self.queues[e]
        while q and q[0][0] <= now:
            self.qbytes[e] -= q.popleft()[1]
        size = p.size
        if self.qbytes[e] + size > self.buffer[e]:
            self._edge_drop[e] += size
            self._terminal(DROP, p, x)
            return
        start = self.busy[e]
        if start > now:
            q.append((start, size, p.flow))
            self.qbytes[e] += size
            self._integral[e] += size * (min(start, self._t1) - now)
        else:
            start = now
        done = start + max(1, int(round(size * self.us_per_byte[e])))
        self.busy[e] = done
        self._edge_tx[e] += size
        self._push(done + self.prop[e], _ARRIVE, p, nh)

    def inject(self, flow_idx, seq, size, src, dst, retx=False):
        p = _Packet(flow_idx, seq, size, src, dst, self.now, retx)
        if flow_idx >= 0:
            self.counters[flow_idx].sent += size
        self._node_tx[src][dst] += size
        self._forward(p, src)
        return p

    # -- transport ------------------------------------------------------
    def _arrive(self, p, x):
        prev = p.path[-1]
        p.path.append(x)
        self._edge_rx[self.eid[prev][x]] += p.size
        if x != p.dst:
            self._forward(p, x)
            return
        f = self.flows[p.flow] if p.flow >= 0 else None
        if f is None or f.protocol != TCP:
            self._deliver(p, x)
            return
        st = self.tcp[p.flow]
        seq = p.seq
        if seq == st.expected:
            self._deliver(p, x)
            st.expected += 1
            if self.log_app_stream:
                st.app_log.append(seq)
            while st.expected in st.ooo:
                st.ooo.discard(st.expected)
                if self.log_app_stream:
                    st.app_log.append(st.expected)
                st.expected += 1
        elif st.expected < seq < st.expected + REORDER_WINDOW and seq not in st.ooo:
            self._deliver(p, x)
            st.ooo.add(seq)
        else:
            self._terminal(DISCARD, p, x)
        self._push(self.now + self.ack_delay[x][p.src], _ACK, p.flow, (st.expected, p.sent, p.retx))

    def _deliver(self, p, x):
        self._terminal(DELIVER, p, x)

    def _arm(self, i, st):
        st.token += 1
        rto = max(int(2 * st.srtt), MIN_RTO_US) * st.backoff
        self._push(self.now + rto, _TIMEOUT, i, st.token)

    def _send_seg(self, i, st, seq, retx):
        f = self.flows[i]
        self.inject(i, seq, st.seg_size(seq), f.src, f.dst, retx)

    def _try_send(self, i, st):
        while st.next_seq < st.nseg and st.next_seq - st.una < int(st.cwnd):
            self._send_seg(i, st, st.next_seq, False)
            st.next_seq += 1

    def _start(self, i):
        f = self.flows[i]
        if f.protocol == TCP:
            rtt0 = 2 * self.ack_delay[f.src][f.dst] + 2 * MSS * 8 // 50
            st = _Tcp(f.size_bytes, float(rtt0))
            self.tcp[i] = st
            self._try_send(i, st)
            self._arm(i, st)
        else:
            self._udp(i, 0)

    def _udp(self, i, k):
        f = self.flows[i]
        interval = MSS * 8.0 / f.bitrate_mbps
        count = max(1, int(f.duration_ms * 1000 // interval))
        self.inject(i, k, MSS, f.src, f.dst)
        if k + 1 < count:
            t = int(round(f.start_ms * 1000)) + int(round((k + 1) * interval))
            self._push(max(t, self.now), _UDP, i, k + 1)

    def _ack(self, i, info):
        st = self.tcp[i]
        if st.done:
            return
        cum, sent, retx = info
        if cum > st.una:
            newly = cum - st.una
            st.una = cum
            st.dupacks = 0
            st.backoff = 1
            if not retx:
                st.srtt = 0.875 * st.srtt + 0.125 * (self.now - sent)
            st.cwnd = min(st.cwnd + newly / st.cwnd, float(TCP_MAX_WINDOW))
            if st.una >= st.nseg:
                st.done = True
                st.token += 1
                return
            st.next_seq = max(st.next_seq, st.una)
            self._try_send(i, st)
            self._arm(i, st)
        elif cum == st.una and st.una < st.next_seq:
            st.dupacks += 1
            if st.dupacks == 3 and st.una >= st.recover:
                st.cwnd = max(st.cwnd / 2.0, 1.0)
                st.recover = st.next_seq
                self._send_seg(i, st, st.una, True)
                self._arm(i, st)

    def _timeout(self, i, token):
        st = self.tcp[i]
        if st.done or token != st.token:
            return
        st.cwnd = max(st.cwnd / 2.0, 1.0)
        st.backoff = min(st.backoff * 2, MAX_BACKOFF)
        st.recover = st.next_seq
        st.dupacks = 0
        self._send_seg(i, st, st.una, True)
        self._arm(i, st)

    # -- main loop ------------------------------------------------------
    def advance(self, until_ms: float) -> StepTrace:
        """Process every event with time <= ``until_ms`` and report what happened."""
        until = int(round(until_ms * 1000))
        if until < self.now:
            raise ValueError("cannot advance backwards in time")
        t0 = self.now
        # counters already hold anything injected since the last trace
        self._t0, self._t1 = t0, until
        for e in range(len(self.edges)):
            self._drain(e)
            for start, size, _ in self.queues[e]:
                self._integral[e] += size * (min(start, until) - t0)
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= until:
            t, _, _, kind, a, b = pop(heap)
            self.now = t
            if kind == _ARRIVE:
                self._arrive(a, b)
            elif kind == _UDP:
                self._udp(a, b)
            elif kind == _ACK:
                self._ack(a, b)
            elif kind == _TIMEOUT:
                self._timeout(a, b)
            elif kind == _START:
                self._start(a)
            else:
                self._set_row(a, b)
        self.now = until
        for e in range(len(self.edges)):
            self._drain(e)
        trace = StepTrace(
            t0, until, self._events,
            np.array(self._node_tx, dtype=np.int64), np.array(self._node_rx, dtype=np.int64),
            np.array(self._node_drop, dtype=np.int64), np.array(self._node_discard, dtype=np.int64),
            np.array(self._edge_tx, dtype=np.int64), np.array(self._edge_rx, dtype=np.int64),
            np.array(self._edge_drop, dtype=np.int64), np.array(self.qbytes, dtype=np.int64),
            np.array(self._integral, dtype=float),
        )
        self._reset_step(until, until)
        return trace

    # -- accounting -----------------------------------------------------
    def in_network(self) -> tuple[dict, dict]:
        """Bytes per flow with a pending arrival, and the subset still waiting in send buffers."""
        pending, queued = {}, {}
        for t, _, _, kind, a, b in self._heap:
            if kind == _ARRIVE:
                pending[a.flow] = pending.get(a.flow, 0) + a.size
        for q in self.queues:
            for start, size, flow in q:
                if start > self.now:
                    queued[flow] = queued.get(flow, 0) + size
        return pending, queued

    def conservation(self) -> dict[int, dict]:
        pending, queued = self.in_network()
        out = {}
        for i, c in enumerate(self.counters):
            pend = pending.get(i, 0)
            q = queued.get(i, 0)
            out[i] = {"sent": c.sent, "delivered": c.delivered, "dropped": c.dropped,
                      "discarded": c.discarded, "queued": q, "in_flight": pend - q}
        return out

    def queue_fractions(self) -> np.ndarray:
        return np.array(self.qbytes, dtype=float) / np.array(self.buffer, dtype=float)
