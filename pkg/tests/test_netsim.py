import numpy as np
import pytest
import simpy

from rapidsim.errors import CollectiveError, DeadlockError
from rapidsim.graph import build_full_graph
from rapidsim.netsim import FluidNetwork, expand_collective, link_utilization_histogram, simulate
from rapidsim.perfmodel import cost_graph
from rapidsim.schema.specs import FaultSpec, LinkFault, ParallelismConfig
from rapidsim.specs import resolve_topology_preset
from rapidsim.topology import apply_faults, build_network
from rapidsim.trace import CommInfo, EventKind, RankTrace, TraceEvent, linearize
from tests.conftest import dim, topology

GB = 1e9


class _Ids:
    def __init__(self):
        self.next = 0

    def __call__(self):
        self.next += 1
        return self.next - 1


def _compute(ids, rank, seconds):
    return TraceEvent(ids(), rank, EventKind.COMPUTE, "work", "fwd", duration=seconds)


def _send(ids, src, dst, nbytes, tag):
    return TraceEvent(ids(), src, EventKind.SEND, "send", "fwd", comm=CommInfo("SendRecv", nbytes, (src, dst), tag))


def _recv(ids, src, dst, nbytes, tag):
    return TraceEvent(ids(), dst, EventKind.RECV, "recv", "fwd", comm=CommInfo("SendRecv", nbytes, (src, dst), tag))


def _collective(ids, rank, kind, group, nbytes, tag="c0"):
    return TraceEvent(ids(), rank, EventKind.COLLECTIVE, kind, "fwd",
                      comm=CommInfo(kind, nbytes, tuple(group), tag))


def _run_collective(net, kind, group, nbytes):
    ids = _Ids()
    traces = [RankTrace(r, [_collective(ids, r, kind, group, nbytes)]) for r in group]
    return simulate(traces, net)


# Fluid sharing

def test_staggered_flows_share_max_min_fairly():
    net = build_network(topology(dim("Mesh1D", 4)))
    env = simpy.Environment()
    fluid = FluidNetwork(env, net, record_flows=True)

    def later(delay, src, nbytes):
        yield env.timeout(delay)
        yield env.process(fluid.transfer(src, 3, nbytes, tag=f"f{src}"))

    for delay, src, nbytes in [(0, 0, 3 * GB), (1, 1, 2 * GB), (2, 2, 1 * GB)]:
        env.process(later(delay, src, nbytes))
    env.run()
    ends = {r.tag: r.end for r in fluid.records}
    assert ends["f2"] == pytest.approx(5.0)
    assert ends["f0"] == pytest.approx(6.0)
    assert ends["f1"] == pytest.approx(6.0)
    stats = {(s.a, s.b): s for s in fluid.link_stats()}
    assert stats[(2, 3)].bytes == pytest.approx(6 * GB)
    assert stats[(2, 3)].max_flows == 3
    assert stats[(0, 1)].bytes == pytest.approx(3 * GB)


def test_route_latency_is_paid_once():
    net = build_network(topology(dim("Mesh1D", 4, latency=1e-3)))
    ids = _Ids()
    traces = [RankTrace(0, [_send(ids, 0, 3, GB, "t")]), RankTrace(3, [_recv(ids, 0, 3, GB, "t")])]
    result = simulate(traces, net)
    assert result.total_time == pytest.approx(1.0 + 3e-3)


def test_opposite_directions_do_not_contend():
    net = build_network(topology(dim("Mesh1D", 2)))
    ids = _Ids()
    traces = [
        RankTrace(0, [_send(ids, 0, 1, GB, "a"), _recv(ids, 1, 0, GB, "b")]),
        RankTrace(1, [_send(ids, 1, 0, GB, "b"), _recv(ids, 0, 1, GB, "a")]),
    ]
    assert simulate(traces, net).total_time == pytest.approx(1.0)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_incast_through_a_switch(k):
    net = build_network(topology(dim("Switch", k + 1)))
    ids = _Ids()
    traces = [RankTrace(0, [_recv(ids, s, 0, GB, f"in{s}") for s in range(1, k + 1)])]
    traces += [RankTrace(s, [_send(ids, s, 0, GB, f"in{s}")]) for s in range(1, k + 1)]
    assert simulate(traces, net).total_time == pytest.approx(k * 1.0)


def test_soft_fault_slows_a_single_flow():
    net = build_network(topology(dim("Mesh1D", 2)))
    faulty = apply_faults(net, FaultSpec(faults=(LinkFault(endpoint_a=0, endpoint_b=1, derate=0.5),)))
    ids = _Ids()
    traces = [RankTrace(0, [_send(ids, 0, 1, GB, "t")]), RankTrace(1, [_recv(ids, 0, 1, GB, "t")])]
    healthy = simulate(traces, net).total_time
    assert simulate(traces, faulty).total_time == pytest.approx(2 * healthy)


# Collectives

@pytest.mark.parametrize("n", [2, 4, 8])
def test_ring_all_reduce_time(n):
    net = build_network(topology(dim("Ring", n)))
    result = _run_collective(net, "AllReduce", range(n), 4 * GB)
    assert result.total_time == pytest.approx(2 * (n - 1) / n * 4.0)


@pytest.mark.parametrize("kind", ["AllGather", "ReduceScatter"])
def test_ring_half_collectives(kind):
    net = build_network(topology(dim("Ring", 4)))
    result = _run_collective(net, kind, range(4), 4 * GB)
    assert result.total_time == pytest.approx(3 / 4 * 4.0)


def test_fully_connected_all_reduce_uses_direct_exchange():
    net = build_network(topology(dim("FullyConnected", 4)))
    result = _run_collective(net, "AllReduce", range(4), 4 * GB)
    # one step of S/4 per peer for each half
    assert result.total_time == pytest.approx(2 * 1.0)


def test_torus_all_reduce_runs_per_dimension():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": GB}))
    stages = expand_collective("AllReduce", range(16), 16 * GB, net)
    assert len(stages) == 4 * 3
    # first stage moves S/4 chunks along dimension 0
    src, dst, nbytes = stages[0][0]
    assert nbytes == pytest.approx(4 * GB)
    assert net.coords(src)[1] == net.coords(dst)[1]
    assert stages[3][0][2] == pytest.approx(GB)


def test_all_to_all_sends_share_per_peer(ring4):
    stages = expand_collective("AllToAll", range(4), 4 * GB, ring4)
    assert len(stages) == 1
    assert len(stages[0]) == 12
    assert all(b == pytest.approx(GB) for _, _, b in stages[0])


def test_non_grid_group_falls_back_to_a_ring():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": GB}))
    stages = expand_collective("AllGather", [0, 1, 5], 3 * GB, net)
    assert len(stages) == 2
    assert {(s, d) for s, d, _ in stages[0]} == {(0, 1), (1, 5), (5, 0)}


def test_degenerate_collectives_are_empty(ring4):
    assert expand_collective("AllReduce", [2], GB, ring4) == []
    assert expand_collective("AllReduce", [0, 1], 0, ring4) == []


def test_collective_errors(ring4):
    with pytest.raises(CollectiveError):
        expand_collective("AllReduce", [0, 9], GB, ring4)
    with pytest.raises(CollectiveError):
        expand_collective("Broadcast", [0, 1], GB, ring4)
    with pytest.raises(CollectiveError):
        expand_collective("SendRecv", [0, 1, 2], GB, ring4)


def test_trace_rank_outside_network(ring4):
    with pytest.raises(CollectiveError):
        simulate([RankTrace(7, [])], ring4)


def test_collective_waits_for_last_member(ring4):
    ids = _Ids()
    traces = [RankTrace(r, [_compute(ids, r, float(r)), _collective(ids, r, "AllReduce", range(4), 4 * GB)])
              for r in range(4)]
    result = simulate(traces, ring4)
    assert result.total_time == pytest.approx(3.0 + 6.0)
    by_rank = {b.rank: b for b in result.ranks}
    assert by_rank[0].idle == pytest.approx(3.0)
    assert by_rank[3].idle == pytest.approx(0.0, abs=1e-9)


# Execution

def test_deadlock_reports_the_cycle():
    net = build_network(topology(dim("Mesh1D", 2)))
    ids = _Ids()
    traces = [
        RankTrace(0, [_recv(ids, 1, 0, GB, "a"), _send(ids, 0, 1, GB, "b")]),
        RankTrace(1, [_recv(ids, 0, 1, GB, "b"), _send(ids, 1, 0, GB, "a")]),
    ]
    with pytest.raises(DeadlockError) as e:
        simulate(traces, net)
    assert sorted(e.value.cycle) == [0, 1]


def test_missing_peer_is_a_deadlock_without_cycle():
    net = build_network(topology(dim("Mesh1D", 2)))
    ids = _Ids()
    with pytest.raises(DeadlockError) as e:
        simulate([RankTrace(0, [_recv(ids, 1, 0, GB, "a")])], net)
    assert e.value.cycle is None


@pytest.mark.parametrize("overlap,expected", [(0.0, 1.5), (0.5, 1.25), (1.0, 1.0)])
def test_overlap_hides_communication(overlap, expected):
    net = build_network(topology(dim("Mesh1D", 2)))
    ids = _Ids()
    traces = [
        RankTrace(0, [_send(ids, 0, 1, GB, "t"), _compute(ids, 0, 0.5)]),
        RankTrace(1, [_recv(ids, 0, 1, GB, "t")]),
    ]
    assert simulate(traces, net, overlap_factor=overlap).total_time == pytest.approx(expected)


def test_single_rank_total_is_its_compute(tiny_inference, a100):
    graph = build_full_graph(tiny_inference, ParallelismConfig())
    traces = linearize(graph, cost_graph(graph, a100, tiny_inference.dtype))
    net = build_network(topology(dim("Ring", 2)))
    result = simulate(traces, net)
    assert result.total_time == pytest.approx(traces[0].compute_time())
    assert result.ranks[0].comm == 0.0


def test_breakdown_timeline_and_flows(ring4):
    ids = _Ids()
    traces = [RankTrace(r, [_compute(ids, r, 0.25), _collective(ids, r, "AllReduce", range(4), 4 * GB)])
              for r in range(4)]
    result = simulate(traces, ring4, timeline=True, record_flows=True)
    for b in result.ranks:
        assert b.compute + b.comm + b.idle == pytest.approx(result.total_time)
    assert len(result.timeline) == 8
    assert all(e.start <= e.end for e in result.timeline)
    # 6 ring steps of 4 flows each
    assert len(result.flows) == 24
    counts, edges = link_utilization_histogram(result, bins=4)
    assert counts.sum() == len(result.links)
    assert len(edges) == 5


def test_simulation_is_deterministic(tiny, a100, ring4):
    graph = build_full_graph(tiny, ParallelismConfig(dp=2, tp=2))
    traces = linearize(graph, cost_graph(graph, a100, tiny.dtype))
    first = simulate(traces, ring4, record_flows=True)
    second = simulate(traces, ring4, record_flows=True)
    assert first == second


# Invariants

def test_link_bytes_conserve_flow_bytes():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": GB, "link_latency": 1e-6}))
    env = simpy.Environment()
    fluid = FluidNetwork(env, net, record_flows=True)
    rng = np.random.default_rng(23)

    def later(delay, src, dst, nbytes, tag):
        yield env.timeout(delay)
        yield env.process(fluid.transfer(src, dst, nbytes, tag=tag))

    for i in range(40):
        src, dst = (int(x) for x in rng.choice(16, size=2, replace=False))
        env.process(later(float(rng.uniform(0, 2)), src, dst, float(rng.uniform(0.1, 1.0)) * GB, f"f{i}"))
    env.run()
    assert len(fluid.records) == 40
    delivered = sum(r.bytes * r.hops for r in fluid.records)
    assert sum(s.bytes for s in fluid.link_stats()) == pytest.approx(delivered, rel=1e-6)


def test_disjoint_pipeline_matches_closed_form():
    net = build_network(topology(dim("Mesh1D", 4, latency=1e-3)))
    ids = _Ids()
    traces = [RankTrace(0, [_send(ids, 0, 1, GB, "h0")])]
    for r in (1, 2):
        traces.append(RankTrace(r, [_recv(ids, r - 1, r, GB, f"h{r - 1}"), _send(ids, r, r + 1, GB, f"h{r}")]))
    traces.append(RankTrace(3, [_recv(ids, 2, 3, GB, "h2")]))
    # three back-to-back single-hop transfers, each alone on its link
    assert simulate(traces, net).total_time == pytest.approx(3 * (1.0 + 1e-3))


def test_derating_any_link_never_speeds_up_a_collective():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": GB, "link_latency": 1e-6}))
    healthy = _run_collective(net, "AllReduce", range(16), 16 * GB).total_time
    for link in net.links:
        faulty = apply_faults(net, FaultSpec(faults=(LinkFault(endpoint_a=link.a, endpoint_b=link.b, derate=0.5),)))
        slowed = _run_collective(faulty, "AllReduce", range(16), 16 * GB).total_time
        assert slowed >= healthy * (1 - 1e-9)


FAULT_TOPOLOGIES = [
    ("Ring", [6]), ("Mesh1D", [5]), ("Torus2D", [4, 4]), ("Torus2D", [3, 4]), ("Mesh2D", [3, 3]),
    ("Torus3D", [2, 2, 3]), ("KingMesh2D", [3, 3]), ("HyperCube", [8]), ("FullyConnected", [5]), ("Switch", [6]),
]


def _barrier_rounds(rng, net, rounds=3):
    """Random compute, transfers over link-disjoint routes, then a zero-byte barrier, per round."""
    ids = _Ids()
    ranks = range(net.num_ranks)
    pairs = np.array([(s, d) for s in ranks for d in ranks if s != d])
    events = {r: [] for r in ranks}
    for k in range(rounds):
        sends = {r: [] for r in ranks}
        recvs = {r: [] for r in ranks}
        used = set()
        for src, dst in rng.permutation(pairs):
            src, dst = int(src), int(dst)
            hops = set(net.route(src, dst).hops)
            if sends[src] or recvs[dst] or hops & used or rng.random() < 0.5:
                continue
            used |= hops
            nbytes = float(rng.uniform(0.1, 2.0)) * GB
            sends[src].append(_send(ids, src, dst, nbytes, f"r{k}.{src}.{dst}"))
            recvs[dst].append(_recv(ids, src, dst, nbytes, f"r{k}.{src}.{dst}"))
        for r in ranks:
            # sends are eager, so posting them before receives cannot deadlock
            events[r] += [_compute(ids, r, float(rng.uniform(0.0, 1e-3)))] + sends[r] + recvs[r]
            events[r].append(_collective(ids, r, "AllReduce", ranks, 0, tag=f"barrier{k}"))
    return [RankTrace(r, events[r]) for r in ranks]


def test_random_soft_faults_never_speed_up_a_run():
    rng = np.random.default_rng(2024)
    samples = 0
    for i in range(50):
        preset, counts = FAULT_TOPOLOGIES[i % len(FAULT_TOPOLOGIES)]
        net = build_network(resolve_topology_preset(preset, counts, {"link_bw": 100 * GB, "link_latency": 1e-6}))
        traces = _barrier_rounds(rng, net)
        healthy = simulate(traces, net).total_time
        assert healthy > 0
        for _ in range(10):
            link = net.links[int(rng.integers(len(net.links)))]
            fault = LinkFault(endpoint_a=link.a, endpoint_b=link.b, derate=float(rng.uniform(0.05, 0.95)),
                              latency_factor=float(rng.uniform(1.0, 3.0)))
            faulty = apply_faults(net, FaultSpec(faults=(fault,)))
            assert simulate(traces, faulty).total_time >= healthy * (1 - 1e-9)
            samples += 1
    assert samples >= 500
