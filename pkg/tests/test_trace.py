import time

import pytest

from rapidsim.config import TRACE_HEADER
from rapidsim.errors import TraceError, TraceFormatError, UncostedNodeError
from rapidsim.graph import build_full_graph, build_layer_graph
from rapidsim.perfmodel import cost_graph
from rapidsim.schema.specs import ParallelismConfig
from rapidsim.trace import (
    CommInfo,
    EventKind,
    RankTrace,
    TraceEvent,
    check_pairing,
    deserialize,
    linearize,
    read_traces,
    serialize,
    write_traces,
)


def _lower(model, par, hw):
    graph = build_full_graph(model, par)
    return graph, linearize(graph, cost_graph(graph, hw, model.dtype))


def test_one_trace_per_rank_in_order(tiny, a100):
    graph, traces = _lower(tiny, ParallelismConfig(dp=2, tp=2), a100)
    assert [t.rank for t in traces] == [0, 1, 2, 3]
    for trace in traces:
        ids = [e.event_id for e in trace.events]
        assert ids == sorted(ids)
        seen = set()
        for e in trace.events:
            assert all(d in seen for d in e.deps)
            seen.add(e.event_id)


def test_compute_time_matches_costs(tiny, a100):
    graph = build_full_graph(tiny, ParallelismConfig())
    costs = cost_graph(graph, a100, tiny.dtype)
    (trace,) = linearize(graph, costs)
    assert trace.compute_time() == pytest.approx(sum(c.seconds for c in costs.values()))


def test_collectives_appear_on_every_member(tiny, a100):
    _, traces = _lower(tiny, ParallelismConfig(tp=2), a100)
    tags = [{e.comm.tag for e in t.events if e.kind == EventKind.COLLECTIVE} for t in traces]
    assert tags[0] == tags[1]
    assert tags[0]


def test_pipeline_sends_pair_with_receives(tiny, a100):
    _, traces = _lower(tiny, ParallelismConfig(pp=2, num_microbatches=2), a100)
    check_pairing(traces)
    sends = [e for e in traces[0].events if e.kind == EventKind.SEND]
    recvs = [e for e in traces[1].events if e.kind == EventKind.RECV]
    assert {e.comm.tag for e in sends} == {e.comm.tag for e in recvs}


def test_receive_precedes_its_consumer(tiny, a100):
    _, traces = _lower(tiny, ParallelismConfig(pp=2, num_microbatches=2), a100)
    for trace in traces:
        position = {e.event_id: i for i, e in enumerate(trace.events)}
        for e in trace.events:
            if e.kind == EventKind.RECV:
                continue
            for d in e.deps:
                assert position[d] < position[e.event_id]


def test_missing_cost_is_reported(tiny):
    graph = build_layer_graph(tiny, ParallelismConfig(), "fwd")
    with pytest.raises(UncostedNodeError):
        linearize(graph, {})


def test_plain_seconds_are_accepted_as_costs(tiny):
    graph = build_layer_graph(tiny, ParallelismConfig(), "fwd")
    compute = [op.id for op in graph.nodes if op.is_compute]
    (trace,) = linearize(graph, {nid: 1e-3 for nid in compute})
    assert trace.compute_time() == pytest.approx(1e-3 * len(compute))


def test_unpaired_send_is_rejected():
    send = TraceEvent(0, 0, EventKind.SEND, "send", "fwd", comm=CommInfo("SendRecv", 8, (0, 1), "x"))
    with pytest.raises(TraceError):
        check_pairing([RankTrace(0, [send]), RankTrace(1, [])])


def test_codec_preserves_traces(tiny, a100):
    _, traces = _lower(tiny, ParallelismConfig(pp=2, tp=2, num_microbatches=2, sp_enabled=True), a100)
    document = serialize(traces)
    assert document.startswith(TRACE_HEADER + "\n")
    assert deserialize(document) == traces
    # a second pass is byte-identical
    assert serialize(deserialize(document)) == document


def test_trace_files_round_trip(tmp_path, tiny, a100):
    _, traces = _lower(tiny, ParallelismConfig(dp=2), a100)
    paths = write_traces(traces, tmp_path / "traces")
    assert [p.name for p in paths] == ["rank0.trace", "rank1.trace"]
    assert read_traces(tmp_path / "traces") == traces


def test_version_mismatch_is_line_one():
    with pytest.raises(TraceFormatError) as e:
        deserialize("rapidsim-trace v0\nranks\t0\n")
    assert e.value.line == 1


@pytest.mark.parametrize("body,line", [
    ("0\t0\tcompute\tgemm\tfwd\t0.1\t1\t-\t-\t-\t-\n", 3),
    ("0\t0\tcompute\tgemm\tfwd\tfast\t1\t-\t-\t-\t-\t-\n", 3),
    ("0\t0\tteleport\tgemm\tfwd\t0.1\t1\t-\t-\t-\t-\t-\n", 3),
    ("0\t0\tcompute\tgemm\tfwd\t0.1\t1\t-\t-\t-\t-\t-\n9\t1\tcompute\tgemm\tfwd\t0.1\t1\t-\t-\t-\t-\t-\n", 4),
])
def test_malformed_lines_are_located(body, line):
    with pytest.raises(TraceFormatError) as e:
        deserialize(f"{TRACE_HEADER}\nranks\t0\n{body}")
    assert e.value.line == line


def _large_traces(ranks, per_rank):
    """Compute-heavy traces with a send/recv pair and an all-reduce every few hundred events."""
    traces = [RankTrace(r) for r in range(ranks)]
    event_id = 0
    group = tuple(range(ranks))
    for i in range(per_rank):
        for trace in traces:
            r = trace.rank
            deps = (event_id - ranks,) if i else ()
            if i % 500 == 499:
                comm = CommInfo("AllReduce", 1 << 20, group, f"coll-{i}")
                event = TraceEvent(event_id, r, EventKind.COLLECTIVE, "dp_allreduce.grads", "bwd_wt", comm=comm,
                                   deps=deps)
            elif i % 200 == 199:
                peer = r ^ 1
                kind = EventKind.SEND if r % 2 == 0 else EventKind.RECV
                src, dst = (r, peer) if kind == EventKind.SEND else (peer, r)
                comm = CommInfo("SendRecv", 4096 + i, (src, dst), f"p2p-{i}-{min(r, peer)}")
                event = TraceEvent(event_id, r, kind, "send" if kind == EventKind.SEND else "recv", "fwd",
                                   comm=comm, deps=deps)
            else:
                event = TraceEvent(event_id, r, EventKind.COMPUTE, "fc1", "fwd", duration=1e-6 * (1 + i % 97) / 3,
                                   repeat=1 + i % 3, deps=deps)
            trace.events.append(event)
            event_id += 1
    return traces


def test_million_event_codec_round_trip():
    traces = _large_traces(ranks=8, per_rank=125_000)
    assert sum(len(t.events) for t in traces) == 1_000_000
    start = time.perf_counter()
    document = serialize(traces)
    restored = deserialize(document)
    elapsed = time.perf_counter() - start
    assert restored == traces
    check_pairing(restored)
    assert elapsed < 120.0
