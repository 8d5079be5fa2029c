"""Per-rank execution traces: lowering from operator graphs and a line-oriented codec."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from rapidsim.config import TRACE_HEADER
from rapidsim.errors import TraceError, TraceFormatError, UncostedNodeError
from rapidsim.graph import EdgeKind, NodeKind, OperatorGraph, OperatorNode
from rapidsim.perfmodel import OpCost

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    COMPUTE = "compute"
    COLLECTIVE = "collective"
    SEND = "send"
    RECV = "recv"


@dataclass(frozen=True)
class CommInfo:
    kind: str
    bytes: int
    group: Tuple[int, ...]
    tag: str


@dataclass(frozen=True)
class TraceEvent:
    event_id: int
    rank: int
    kind: EventKind
    name: str
    phase: str
    duration: float = 0.0
    comm: Optional[CommInfo] = None
    repeat: int = 1
    deps: Tuple[int, ...] = ()


@dataclass
class RankTrace:
    rank: int
    events: List[TraceEvent] = field(default_factory=list)

    def compute_time(self) -> float:
        return sum(e.duration for e in self.events if e.kind == EventKind.COMPUTE)


# Lowering

@dataclass
class _Slot:
    """One event before ids are assigned."""
    key: Tuple
    kind: EventKind
    node: OperatorNode
    duration: float = 0.0
    comm: Optional[CommInfo] = None
    preds: Tuple[Tuple, ...] = ()


def _cross_tag(u: int, v: int, rank: int) -> str:
    return f"edge-{u}-{v}-{rank}"


def _owner(node: OperatorNode) -> int:
    """Rank holding the node's output."""
    return node.ranks[1] if node.kind == NodeKind.P2P else node.ranks[0]


def linearize(graph: OperatorGraph, costs: Mapping[int, Union[OpCost, float]]) -> List[RankTrace]:
    """Lower the graph to one ordered event list per rank.

    Ranks follow the graph's global order. A receive is placed right before
    its first consumer so waiting on a peer never blocks independent work.
    Edges between nodes that share no rank become send/recv pairs.
    """
    order = graph.order()
    dg = graph.digraph
    slots: Dict[int, List[_Slot]] = {r: [] for r in graph.ranks}
    deferred: Dict[int, List[_Slot]] = {}
    # (node, rank) -> slot key used by dependants on that rank
    key_of: Dict[Tuple[int, int], Tuple] = {}
    # (node, rank) -> receives of cross-rank edges into that node
    cross_in: Dict[Tuple[int, int], List[Tuple]] = {}

    for nid in order:
        node = graph.node(nid)
        for rank in node.ranks:
            preds = tuple(key_of[(p, rank)] for p in dg.predecessors(nid) if (p, rank) in key_of)
            preds += tuple(cross_in.get((nid, rank), ()))
            if node.is_compute:
                cost = costs.get(nid)
                if cost is None:
                    raise UncostedNodeError(nid, node.name)
                seconds = cost.seconds if isinstance(cost, OpCost) else float(cost)
                slot = _Slot(("n", nid), EventKind.COMPUTE, node, seconds, None, preds)
            elif node.kind == NodeKind.COLLECTIVE:
                info = CommInfo(node.comm.kind.value, node.comm.bytes, node.ranks, f"coll-{nid}")
                slot = _Slot(("n", nid), EventKind.COLLECTIVE, node, 0.0, info, preds)
            else:
                src, dst = node.ranks
                kind = EventKind.SEND if rank == src else EventKind.RECV
                info = CommInfo(node.comm.kind.value, node.comm.bytes, (src, dst), f"p2p-{nid}")
                slot = _Slot(("n", nid), kind, node, 0.0, info, preds)
                if kind == EventKind.RECV:
                    key_of[(nid, rank)] = slot.key
                    deferred.setdefault(rank, []).append(slot)
                    continue
            key_of[(nid, rank)] = slot.key
            slots[rank].append(slot)

        for succ in dg.successors(nid):
            target = graph.node(succ)
            if node.kind == NodeKind.P2P and not target.on_rank(node.ranks[1]):
                # a control edge back into the sender orders its next block after the send
                if dg.edges[nid, succ]["kind"] == EdgeKind.CONTROL and target.on_rank(node.ranks[0]):
                    continue
                raise TraceError(f"p2p node {nid} feeds node {succ} off its destination rank {node.ranks[1]}")
            if set(node.ranks) & set(target.ranks):
                continue
            src = _owner(node)
            payload = node.out_bytes if dg.edges[nid, succ]["kind"] != EdgeKind.CONTROL else 0
            for rank in target.ranks:
                tag = _cross_tag(nid, succ, rank)
                info = CommInfo("SendRecv", payload, (src, rank), tag)
                send = _Slot(("s", nid, succ, rank), EventKind.SEND, node, 0.0, info, (key_of[(nid, src)],))
                slots[src].append(send)
                recv = _Slot(("r", nid, succ, rank), EventKind.RECV, target, 0.0, info, ())
                cross_in.setdefault((succ, rank), []).append(recv.key)
                deferred.setdefault(rank, []).append(recv)

    traces = []
    next_id = 0
    for rank in sorted(slots):
        placed = _place_receives(slots[rank], deferred.get(rank, []))
        ids: Dict[Tuple, int] = {}
        events = []
        prev: Optional[int] = None
        for slot in placed:
            deps = sorted({ids[k] for k in slot.preds if k in ids} | ({prev} if prev is not None else set()))
            event = TraceEvent(
                event_id=next_id,
                rank=rank,
                kind=slot.kind,
                name=slot.node.name,
                phase=slot.node.phase.value,
                duration=slot.duration,
                comm=slot.comm,
                repeat=slot.node.repeat,
                deps=tuple(deps),
            )
            ids[slot.key] = next_id
            prev = next_id
            next_id += 1
            events.append(event)
        traces.append(RankTrace(rank, events))
    logger.debug(f"[linearize] {next_id} events over {len(traces)} ranks")
    return traces


def _place_receives(slots: List[_Slot], receives: List[_Slot]) -> List[_Slot]:
    """Insert each receive right before the first slot that depends on it."""
    if not receives:
        return list(slots)
    pending = {r.key: r for r in receives}
    placed: List[_Slot] = []
    for slot in slots:
        for key in slot.preds:
            recv = pending.pop(key, None)
            if recv is not None:
                placed.append(recv)
        placed.append(slot)
    # receives nobody on this rank consumes still complete the transfer
    placed.extend(r for r in receives if r.key in pending)
    return placed


def check_pairing(traces: Sequence[RankTrace]) -> None:
    """Every send tag has exactly one matching recv and vice versa."""
    sends: Dict[str, int] = {}
    recvs: Dict[str, int] = {}
    for trace in traces:
        for e in trace.events:
            if e.kind == EventKind.SEND:
                if e.comm.tag in sends:
                    raise TraceError(f"duplicate send tag {e.comm.tag}")
                sends[e.comm.tag] = e.rank
            elif e.kind == EventKind.RECV:
                if e.comm.tag in recvs:
                    raise TraceError(f"duplicate recv tag {e.comm.tag}")
                recvs[e.comm.tag] = e.rank
    unmatched = set(sends) ^ set(recvs)
    if unmatched:
        raise TraceError(f"unpaired tags: {', '.join(sorted(unmatched)[:5])}")


# Codec

_NONE = "-"


def _join(values: Sequence[int]) -> str:
    return ",".join(str(v) for v in values) if values else _NONE


def _split(token: str) -> Tuple[int, ...]:
    return () if token == _NONE else tuple(int(v) for v in token.split(","))


def _event_line(e: TraceEvent) -> str:
    comm = e.comm
    fields = [
        str(e.rank), str(e.event_id), e.kind.value, e.name, e.phase, repr(float(e.duration)), str(e.repeat),
        comm.kind if comm else _NONE,
        str(comm.bytes) if comm else _NONE,
        _join(comm.group) if comm else _NONE,
        comm.tag if comm else _NONE,
        _join(e.deps),
    ]
    return "\t".join(fields)


def serialize(traces: Sequence[RankTrace]) -> str:
    """Header, rank list, then one tab-separated event per line."""
    lines = [TRACE_HEADER]
    if traces:
        lines.append("ranks\t" + ",".join(str(t.rank) for t in traces))
    for trace in traces:
        lines.extend(_event_line(e) for e in trace.events)
    return "\n".join(lines) + "\n"


def _parse_event(line: str, lineno: int) -> TraceEvent:
    parts = line.split("\t")
    if len(parts) != 12:
        raise TraceFormatError(lineno, f"expected 12 fields, got {len(parts)}")
    rank, event_id, kind, name, phase, duration, repeat, ckind, nbytes, group, tag, deps = parts
    try:
        event_kind = EventKind(kind)
    except ValueError:
        raise TraceFormatError(lineno, f"unknown event kind {kind!r}")
    try:
        comm = None
        if ckind != _NONE:
            comm = CommInfo(ckind, int(nbytes), _split(group), tag)
        return TraceEvent(
            event_id=int(event_id),
            rank=int(rank),
            kind=event_kind,
            name=name,
            phase=phase,
            duration=float(duration),
            comm=comm,
            repeat=int(repeat),
            deps=_split(deps),
        )
    except ValueError as e:
        raise TraceFormatError(lineno, f"bad numeric field: {e}")


def deserialize(document: str) -> List[RankTrace]:
    lines = document.splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        found = lines[0] if lines else ""
        raise TraceFormatError(1, f"version mismatch: expected {TRACE_HEADER!r}, found {found!r}")
    traces: Dict[int, RankTrace] = {}
    start = 1
    if len(lines) > 1 and lines[1].startswith("ranks\t"):
        try:
            for r in _split(lines[1].split("\t", 1)[1]):
                traces[r] = RankTrace(r)
        except ValueError:
            raise TraceFormatError(2, "bad rank list")
        start = 2
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line:
            continue
        event = _parse_event(line, lineno)
        if event.rank not in traces:
            raise TraceFormatError(lineno, f"rank {event.rank} missing from the rank list")
        traces[event.rank].events.append(event)
    return list(traces.values())


def write_traces(traces: Sequence[RankTrace], directory: Union[str, Path]) -> List[Path]:
    """One `rank<N>.trace` file per rank."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for trace in traces:
        path = out / f"rank{trace.rank}.trace"
        path.write_text(serialize([trace]), encoding="utf-8")
        paths.append(path)
    return paths


def read_traces(directory: Union[str, Path]) -> List[RankTrace]:
    traces = []
    for path in sorted(Path(directory).glob("rank*.trace"), key=lambda p: int(p.stem[4:])):
        traces.extend(deserialize(path.read_text(encoding="utf-8")))
    return traces
