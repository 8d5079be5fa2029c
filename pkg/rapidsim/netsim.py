"""Discrete-event execution of per-rank traces on a fluid-flow network.

Flows share directed link capacity max-min fairly; shares are recomputed
whenever a flow starts or finishes. Each flow pays its route latency once
before it starts moving bytes.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Generator, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
import simpy

from rapidsim.errors import CollectiveError, DeadlockError
from rapidsim.models import FlowRecord, LinkStats, RankBreakdown, SimResult, TimelineEntry
from rapidsim.schema.specs import BaseTopology
from rapidsim.topology import Network, Route
from rapidsim.trace import EventKind, RankTrace, TraceEvent

logger = logging.getLogger(__name__)

Hop = Tuple[int, int]
Transfer = Tuple[int, int, float]  # (src, dst, bytes)


@dataclass(eq=False)
class Flow:
    flow_id: int
    src: int
    dst: int
    route: Route
    size: float
    remaining: float
    start: float
    tag: str = ""
    rate: float = 0.0
    end: Optional[float] = None
    done: Optional[simpy.Event] = None

    @property
    def hops(self) -> Tuple[Hop, ...]:
        return self.route.hops


@dataclass
class _LinkUsage:
    busy_time: float = 0.0
    bytes: float = 0.0
    max_flows: int = 0


class FluidNetwork:
    """Active flows and their max-min fair rates over a Network."""

    def __init__(self, env: simpy.Environment, net: Network, record_flows: bool = False):
        self.env = env
        self.net = net
        self.active: List[Flow] = []
        self.records: Optional[List[FlowRecord]] = [] if record_flows else None
        self.usage: Dict[Tuple[int, int], _LinkUsage] = {link.key: _LinkUsage() for link in net.links}
        self._capacity: Dict[Hop, float] = {}
        for link in net.links:
            if link.usable:
                self._capacity[(link.a, link.b)] = link.effective_bw
                self._capacity[(link.b, link.a)] = link.effective_bw
        self._next_id = 0
        self._last_update = 0.0
        self._generation = 0

    def transfer(self, src: int, dst: int, nbytes: float, tag: str = "") -> Generator:
        """Process body that moves `nbytes` from src to dst."""
        if src == dst:
            return
        route = self.net.route(src, dst)
        if route.latency > 0:
            yield self.env.timeout(route.latency)
        if nbytes <= 0:
            self._record(src, dst, 0.0, self.env.now, self.env.now, len(route), tag)
            return
        flow = Flow(self._next_id, src, dst, route, float(nbytes), float(nbytes), self.env.now, tag)
        flow.done = self.env.event()
        self._next_id += 1
        self._advance()
        self.active.append(flow)
        self._reallocate()
        yield flow.done

    # Fluid model

    def _advance(self) -> None:
        now = self.env.now
        elapsed = now - self._last_update
        self._last_update = now
        if elapsed <= 0 or not self.active:
            return
        on_link: Dict[Tuple[int, int], float] = {}
        for flow in self.active:
            moved = flow.rate * elapsed
            flow.remaining -= moved
            for u, v in flow.hops:
                key = (u, v) if u < v else (v, u)
                on_link[key] = on_link.get(key, 0.0) + moved
        for key, moved in on_link.items():
            stats = self.usage[key]
            stats.busy_time += elapsed
            stats.bytes += moved

    def _reallocate(self) -> None:
        """Progressive filling over directed hops."""
        flows = self.active
        for flow in flows:
            flow.rate = 0.0
        crossing: Dict[Hop, List[Flow]] = {}
        for flow in flows:
            for hop in flow.hops:
                crossing.setdefault(hop, []).append(flow)
        per_link: Dict[Tuple[int, int], int] = {}
        for (u, v), members in crossing.items():
            key = (u, v) if u < v else (v, u)
            per_link[key] = per_link.get(key, 0) + len(members)
        for key, count in per_link.items():
            stats = self.usage[key]
            stats.max_flows = max(stats.max_flows, count)

        capacity = {hop: self._capacity[hop] for hop in crossing}
        unfixed: Set[int] = {f.flow_id for f in flows}
        while unfixed:
            share = math.inf
            for hop in sorted(crossing):
                n = sum(1 for f in crossing[hop] if f.flow_id in unfixed)
                if n:
                    share = min(share, capacity[hop] / n)
            tight = []
            for hop in sorted(crossing):
                n = sum(1 for f in crossing[hop] if f.flow_id in unfixed)
                if n and capacity[hop] / n <= share * (1 + 1e-12):
                    tight.append(hop)
            for hop in tight:
                for flow in crossing[hop]:
                    if flow.flow_id not in unfixed:
                        continue
                    flow.rate = share
                    unfixed.discard(flow.flow_id)
                    for h in flow.hops:
                        capacity[h] = max(0.0, capacity[h] - share)
        self._schedule_next()

    def _schedule_next(self) -> None:
        self._generation += 1
        if not self.active:
            return
        generation = self._generation
        dt = min(f.remaining / f.rate for f in self.active)
        timer = self.env.timeout(max(0.0, dt))
        timer.callbacks.append(lambda _event: self._on_timer(generation))

    def _on_timer(self, generation: int) -> None:
        if generation != self._generation:
            return
        self._advance()
        finished = [f for f in self.active if f.remaining <= max(1e-6, 1e-9 * f.size)]
        if not finished:
            self._schedule_next()
            return
        for flow in finished:
            flow.remaining = 0.0
            flow.end = self.env.now
            self.active.remove(flow)
            self._record(flow.src, flow.dst, flow.size, flow.start, flow.end, len(flow.route), flow.tag)
            flow.done.succeed()
        self._reallocate()

    def _record(self, src: int, dst: int, nbytes: float, start: float, end: float, hops: int, tag: str) -> None:
        if self.records is not None:
            self.records.append(FlowRecord(src=src, dst=dst, bytes=nbytes, start=start, end=end, hops=hops, tag=tag))

    def link_stats(self) -> List[LinkStats]:
        self._advance()
        return [
            LinkStats(a=link.a, b=link.b, dim=link.dim, busy_time=self.usage[link.key].busy_time,
                      bytes=self.usage[link.key].bytes, max_flows=self.usage[link.key].max_flows)
            for link in self.net.links
        ]


# Collective expansion

def _ring_steps(members: Sequence[int], chunk: float) -> List[List[Transfer]]:
    n = len(members)
    return [[(members[i], members[(i + 1) % n], chunk) for i in range(n)] for _ in range(n - 1)]


def _direct_exchange(members: Sequence[int], chunk: float) -> List[List[Transfer]]:
    return [[(a, b, chunk) for a in members for b in members if a != b]]


def _dim_phase(net: Network, dim: Optional[int], lines: List[List[int]], chunk: float,
               all_to_all: bool = False) -> List[List[Transfer]]:
    """Concurrent per-line schedules along one dimension, merged step by step."""
    direct = all_to_all or (
        dim is not None and net.dims[dim].base in (BaseTopology.FULLY_CONNECTED, BaseTopology.SWITCH)
    )
    merged: List[List[Transfer]] = []
    for members in lines:
        steps = _direct_exchange(members, chunk) if direct else _ring_steps(members, chunk)
        for i, step in enumerate(steps):
            if i == len(merged):
                merged.append([])
            merged[i].extend(step)
    return merged


def _grid_lines(net: Network, group: Sequence[int]) -> Optional[List[Tuple[int, List[List[int]]]]]:
    """Lines of the group along each spanned dimension, or None if it is not a sub-grid."""
    coords = {r: net.coords(r) for r in group}
    ndims = len(net.radices)
    values = [sorted({c[d] for c in coords.values()}) for d in range(ndims)]
    if math.prod(len(v) for v in values) != len(group):
        return None
    spanned = [d for d in range(ndims) if len(values[d]) > 1]
    members = set(group)
    result = []
    for d in spanned:
        lines: Dict[Tuple[int, ...], List[int]] = {}
        for r in sorted(group):
            c = coords[r]
            key = c[:d] + c[d + 1:]
            lines.setdefault(key, []).append(r)
        ordered = [sorted(line, key=lambda r: coords[r][d]) for _, line in sorted(lines.items())]
        if any(len(line) != len(values[d]) for line in ordered) or not all(r in members for l in ordered for r in l):
            return None
        result.append((d, ordered))
    return result


def expand_collective(kind: str, group: Sequence[int], nbytes: float, net: Network) -> List[List[Transfer]]:
    """Bulk-synchronous stages of point-to-point transfers implementing a collective.

    Sizes follow NCCL conventions: AllReduce and ReduceScatter take the full
    input buffer, AllGather the full output buffer, AllToAll the total a rank
    sends.
    """
    kind = getattr(kind, "value", kind)
    group = sorted(set(group))
    for r in group:
        if not (0 <= r < net.num_ranks):
            raise CollectiveError(f"{kind} group member {r} is not a rank of the {net.num_ranks}-rank network")
    n = len(group)
    if n <= 1 or nbytes <= 0:
        return []
    if kind == "SendRecv":
        if n != 2:
            raise CollectiveError(f"SendRecv needs exactly two ranks, got {group}")
        return [[(group[0], group[1], float(nbytes))]]

    lines = _grid_lines(net, group)
    if lines is None:
        # not a sub-grid: one flat ring over the sorted group
        lines = [(None, [list(group)])]

    stages: List[List[Transfer]] = []
    if kind == "AllToAll":
        for dim, dim_lines in lines:
            stages += _dim_phase(net, dim, dim_lines, nbytes / len(dim_lines[0]), all_to_all=True)
        return stages

    reduce_phase: List[List[Transfer]] = []
    size = float(nbytes)
    if kind in ("AllReduce", "ReduceScatter"):
        for dim, dim_lines in lines:
            width = len(dim_lines[0])
            reduce_phase += _dim_phase(net, dim, dim_lines, size / width)
            size /= width
        if kind == "ReduceScatter":
            return reduce_phase
        gather_start = size
    elif kind == "AllGather":
        gather_start = float(nbytes) / n
    else:
        raise CollectiveError(f"unknown collective kind {kind!r}")

    gather_phase: List[List[Transfer]] = []
    size = gather_start
    for dim, dim_lines in reversed(lines):
        width = len(dim_lines[0])
        gather_phase += _dim_phase(net, dim, dim_lines, size)
        size *= width
    return reduce_phase + gather_phase


# Trace execution

@dataclass
class _Rendezvous:
    group: Tuple[int, ...]
    arrived: Set[int] = field(default_factory=set)
    all_arrived: Optional[simpy.Event] = None
    done: Optional[simpy.Event] = None


@dataclass
class _RankState:
    compute: float = 0.0
    comm: float = 0.0
    waiting: Optional[Tuple[str, str, Tuple[int, ...]]] = None  # (what, tag, peers)
    current: str = ""
    finished: bool = False


class _Simulation:
    def __init__(self, traces: Sequence[RankTrace], net: Network, overlap_factor: float,
                 timeline: bool, record_flows: bool):
        self.env = simpy.Environment()
        self.net = net
        self.fluid = FluidNetwork(self.env, net, record_flows)
        self.traces = sorted(traces, key=lambda t: t.rank)
        self.overlap = overlap_factor
        self.timeline: Optional[List[TimelineEntry]] = [] if timeline else None
        self.mail: Dict[str, simpy.Event] = {}
        self.send_started: Dict[str, float] = {}
        self.rendezvous: Dict[str, _Rendezvous] = {}
        self.states: Dict[int, _RankState] = {t.rank: _RankState() for t in self.traces}
        self._stage_cache: Dict[Tuple[str, Tuple[int, ...], int], List[List[Transfer]]] = {}

    def _mailbox(self, tag: str) -> simpy.Event:
        if tag not in self.mail:
            self.mail[tag] = self.env.event()
        return self.mail[tag]

    def _stages(self, event: TraceEvent) -> List[List[Transfer]]:
        key = (event.comm.kind, event.comm.group, event.comm.bytes)
        if key not in self._stage_cache:
            self._stage_cache[key] = expand_collective(event.comm.kind, event.comm.group, event.comm.bytes, self.net)
        return self._stage_cache[key]

    def _run_collective(self, event: TraceEvent, meeting: _Rendezvous) -> Generator:
        stages = self._stages(event)
        for _ in range(event.repeat):
            for stage in stages:
                procs = [self.env.process(self.fluid.transfer(s, d, b, event.comm.tag)) for s, d, b in stage]
                yield self.env.all_of(procs)
        meeting.done.succeed()

    def _rank(self, trace: RankTrace) -> Generator:
        env = self.env
        state = self.states[trace.rank]
        comm_wait = 0.0
        for event in trace.events:
            start = env.now
            state.current = f"{event.kind.value} {event.name} (event {event.event_id})"
            if event.kind == EventKind.COMPUTE:
                hidden = self.overlap * min(comm_wait, event.duration)
                exposed = event.duration - hidden
                if exposed > 0:
                    yield env.timeout(exposed)
                state.compute += exposed
                comm_wait = 0.0
            elif event.kind == EventKind.SEND:
                tag = event.comm.tag
                src, dst = event.comm.group
                self.send_started[tag] = start
                for _ in range(event.repeat):
                    yield env.process(self.fluid.transfer(src, dst, event.comm.bytes, tag))
                self._mailbox(tag).succeed()
                state.comm += env.now - start
                comm_wait += env.now - start
            elif event.kind == EventKind.RECV:
                tag = event.comm.tag
                state.waiting = ("recv", tag, (event.comm.group[0],))
                yield self._mailbox(tag)
                state.waiting = None
                busy = env.now - max(start, self.send_started.get(tag, start))
                state.comm += busy
                comm_wait += busy
            else:
                tag = event.comm.tag
                meeting = self.rendezvous.get(tag)
                if meeting is None:
                    meeting = _Rendezvous(event.comm.group, all_arrived=env.event(), done=env.event())
                    self.rendezvous[tag] = meeting
                meeting.arrived.add(trace.rank)
                if len(meeting.arrived) == len(meeting.group):
                    meeting.all_arrived.succeed()
                    env.process(self._run_collective(event, meeting))
                state.waiting = ("collective", tag, meeting.group)
                yield meeting.all_arrived
                state.waiting = None
                began = env.now
                yield meeting.done
                state.comm += env.now - began
                comm_wait += env.now - began
            if self.timeline is not None:
                self.timeline.append(TimelineEntry(rank=trace.rank, event_id=event.event_id, name=event.name,
                                                   kind=event.kind.value, start=start, end=env.now))
        state.finished = True
        state.current = ""

    def run(self) -> SimResult:
        for trace in self.traces:
            self.env.process(self._rank(trace))
        self.env.run()
        stalled = [r for r, s in self.states.items() if not s.finished]
        if stalled:
            self._raise_deadlock(stalled)
        total = self.env.now
        ranks = [
            RankBreakdown(rank=r, compute=s.compute, comm=s.comm, idle=max(0.0, total - s.compute - s.comm))
            for r, s in sorted(self.states.items())
        ]
        timeline = None
        if self.timeline is not None:
            timeline = sorted(self.timeline, key=lambda e: (e.start, e.rank, e.event_id))
        return SimResult(total_time=total, ranks=ranks, links=self.fluid.link_stats(),
                         timeline=timeline, flows=self.fluid.records)

    def _raise_deadlock(self, stalled: List[int]) -> None:
        waits = nx.DiGraph()
        waiting = []
        for r in stalled:
            state = self.states[r]
            waiting.append(f"rank {r} blocked at {state.current}")
            if state.waiting is None:
                continue
            what, tag, peers = state.waiting
            if what == "recv":
                waits.add_edge(r, peers[0])
            else:
                arrived = self.rendezvous[tag].arrived
                for p in peers:
                    if p not in arrived:
                        waits.add_edge(r, p)
        try:
            cycle = [u for u, _ in nx.find_cycle(waits)]
        except nx.NetworkXNoCycle:
            cycle = None
        raise DeadlockError(waiting, cycle)


def simulate(
    traces: Sequence[RankTrace],
    net: Network,
    *,
    overlap_factor: float = 0.0,
    timeline: bool = False,
    record_flows: bool = False,
) -> SimResult:
    """Run every rank's trace to completion and report timing and link usage."""
    for trace in traces:
        if not (0 <= trace.rank < net.num_ranks):
            raise CollectiveError(f"trace rank {trace.rank} is not in the {net.num_ranks}-rank network")
    result = _Simulation(traces, net, overlap_factor, timeline, record_flows).run()
    logger.debug(f"[simulate] {len(traces)} ranks finished at {result.total_time:.6g} s")
    return result


def link_utilization_histogram(result: SimResult, bins: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """Histogram of per-link busy fraction over the run."""
    if result.total_time <= 0 or not result.links:
        return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
    fractions = np.clip([link.busy_time / result.total_time for link in result.links], 0.0, 1.0)
    return np.histogram(fractions, bins=bins, range=(0.0, 1.0))
