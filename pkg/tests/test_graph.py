import pytest

from rapidsim.errors import GraphCycleError, ShardingError
from rapidsim.graph import (
    CollectiveKind,
    EdgeKind,
    NodeKind,
    OperatorGraph,
    OperatorNode,
    PhaseTag,
    build_endpoint_graph,
    build_full_graph,
    build_layer_graph,
    build_pipeline_graph,
    check_sharding,
    comm_pattern_for,
    decode_buckets,
)
from rapidsim.memmodel import static_memory
from rapidsim.perfmodel import cost_graph
from rapidsim.schema.specs import ParallelismConfig, Recompute
from rapidsim.trace import check_pairing, linearize


def _collectives(graph):
    return [op for op in graph.nodes if op.kind == NodeKind.COLLECTIVE]


def test_comm_patterns():
    assert comm_pattern_for("dp", "bwd") == [CollectiveKind.ALL_REDUCE]
    assert comm_pattern_for("DP", "fwd") == []
    assert comm_pattern_for("tp", "fwd") == [CollectiveKind.ALL_GATHER, CollectiveKind.ALL_REDUCE]
    assert comm_pattern_for("pp", "bwd") == [CollectiveKind.SEND_RECV]
    assert comm_pattern_for("cp", "fwd") == [CollectiveKind.ALL_TO_ALL]


@pytest.mark.parametrize("prefill,decode,ratio", [(512, 128, 1.5), (16, 200, 1.25), (1, 50, 2.0)])
def test_decode_buckets_cover_every_step(prefill, decode, ratio):
    buckets = decode_buckets(prefill, decode, ratio, exact=False)
    assert sum(steps for _, steps in buckets) == decode
    kvs = [kv for kv, _ in buckets]
    assert kvs == sorted(kvs)
    assert prefill + 1 <= kvs[0] and kvs[-1] <= prefill + decode


def test_exact_decode_is_one_pass_per_step():
    assert decode_buckets(10, 3, 1.5, exact=True) == [(11, 1), (12, 1), (13, 1)]
    assert decode_buckets(10, 0, 1.5, exact=False) == []


@pytest.mark.parametrize("par,axis", [
    (ParallelismConfig(tp=3), "tp"),
    (ParallelismConfig(pp=4), "pp"),
    (ParallelismConfig(cp=3), "cp"),
    (ParallelismConfig(dp=16), "dp"),
])
def test_sharding_errors_name_the_axis(tiny, par, axis):
    with pytest.raises(ShardingError) as e:
        check_sharding(tiny, par)
    assert e.value.axis == axis


def test_cycle_is_reported():
    graph = OperatorGraph()
    for i in range(2):
        graph.add_node(OperatorNode(i, f"n{i}", NodeKind.POINTWISE, (0,), PhaseTag.FWD, 0, 0))
    graph.add_edge(0, 1)
    graph.add_edge(1, 0)
    with pytest.raises(GraphCycleError):
        graph.order()


def test_saved_edge_dominates_data():
    graph = OperatorGraph()
    for i in range(2):
        graph.add_node(OperatorNode(i, f"n{i}", NodeKind.POINTWISE, (0,), PhaseTag.FWD, 0, 0))
    graph.add_edge(0, 1, EdgeKind.SAVED)
    graph.add_edge(0, 1, EdgeKind.CONTROL)
    assert graph.edge_kind(0, 1) == EdgeKind.SAVED


def test_tensor_parallel_layer_reduces_twice(tiny):
    graph = build_layer_graph(tiny, ParallelismConfig(tp=2), "fwd")
    kinds = [op.comm.kind for op in _collectives(graph)]
    assert kinds == [CollectiveKind.ALL_REDUCE, CollectiveKind.ALL_REDUCE]
    assert all(op.ranks == (0, 1) for op in _collectives(graph))
    gemms = [op for op in graph.nodes if op.kind == NodeKind.GEMM and op.rank == 0]
    assert {op.name for op in gemms} == {"qkv_proj", "out_proj", "fc1", "fc2"}
    # each rank holds 1/tp of the qkv projection
    qkv = next(op for op in gemms if op.name == "qkv_proj")
    assert qkv.shape.n == 3 * tiny.hidden_dim // 2


def test_sequence_parallel_swaps_reduce_for_gather_and_scatter(tiny):
    graph = build_layer_graph(tiny, ParallelismConfig(tp=2, sp_enabled=True), "fwd")
    kinds = sorted(op.comm.kind.value for op in _collectives(graph))
    assert kinds == ["AllGather", "AllGather", "ReduceScatter", "ReduceScatter"]


def test_context_parallel_exchanges_kv(tiny):
    graph = build_layer_graph(tiny, ParallelismConfig(cp=2), "fwd")
    kinds = [op.comm.kind for op in _collectives(graph)]
    assert kinds == [CollectiveKind.ALL_TO_ALL]


def test_single_rank_layer_has_no_communication(tiny):
    for direction in ("fwd", "bwd"):
        graph = build_layer_graph(tiny, ParallelismConfig(), direction)
        assert not _collectives(graph)
        assert graph.ranks == [0]


def test_endpoint_graphs(tiny):
    embed = build_endpoint_graph(tiny, ParallelismConfig(), "embedding", "fwd")
    head = build_endpoint_graph(tiny, ParallelismConfig(), "head", "bwd")
    assert len(embed) >= 1 and len(head) >= 1
    with pytest.raises(ValueError):
        build_endpoint_graph(tiny, ParallelismConfig(), "middle")


@pytest.mark.parametrize("par", [
    ParallelismConfig(dp=2, tp=2),
    ParallelismConfig(pp=2, num_microbatches=2, zero_stage="z1"),
    ParallelismConfig(tp=2, cp=2, sp_enabled=True, recompute="selective"),
    ParallelismConfig(dp=2, pp=2, num_microbatches=4, recompute="full", zero_stage="z2"),
])
def test_full_training_graph_is_well_formed(tiny, a100, par):
    graph = build_full_graph(tiny, par)
    graph.check()
    assert graph.ranks == list(range(par.world_size))
    order = {nid: i for i, nid in enumerate(graph.order())}
    for u, v, _ in graph.edges():
        assert order[u] < order[v]
    traces = linearize(graph, cost_graph(graph, a100, tiny.dtype))
    assert [t.rank for t in traces] == graph.ranks
    check_pairing(traces)


def test_data_parallel_gradient_sync(tiny):
    plain = build_full_graph(tiny, ParallelismConfig(dp=2))
    sharded = build_full_graph(tiny, ParallelismConfig(dp=2, zero_stage="z1"))
    assert [op.name for op in _collectives(plain)] == ["dp_allreduce.grads"]
    assert sorted(op.name for op in _collectives(sharded)) == ["dp_allgather.params", "dp_reduce_scatter.grads"]


def test_pipeline_sends_between_stages(tiny, a100):
    graph = build_full_graph(tiny, ParallelismConfig(pp=2, num_microbatches=2))
    sends = [op for op in graph.nodes if op.kind == NodeKind.P2P]
    # forward activation and backward gradient per microbatch
    assert len(sends) == 4
    assert {op.ranks for op in sends} == {(0, 1), (1, 0)}
    traces = linearize(graph, cost_graph(graph, a100, tiny.dtype))
    check_pairing(traces)
    kinds = [e.kind.value for t in traces for e in t.events]
    assert kinds.count("send") == kinds.count("recv") == 4


@pytest.mark.parametrize("policy", list(Recompute))
def test_recompute_nodes_follow_policy(tiny, policy):
    graph = build_full_graph(tiny, ParallelismConfig(recompute=policy))
    recomputed = {op.name for op in graph.nodes if op.recompute}
    if policy == Recompute.NONE:
        assert not recomputed
    elif policy == Recompute.SELECTIVE:
        assert recomputed == {"recompute.attention"}
    else:
        assert "recompute.qkv_proj" in recomputed


def test_inference_graph_buckets_decode(tiny_inference):
    graph = build_full_graph(tiny_inference, ParallelismConfig(), decode_bucket_ratio=1.5)
    buckets = graph.metadata["decode_buckets"]
    assert sum(steps for _, steps in buckets) == tiny_inference.decode_len
    exact = build_full_graph(tiny_inference, ParallelismConfig(), exact_decode=True)
    assert len(exact.metadata["decode_buckets"]) == tiny_inference.decode_len
    assert len(exact) > len(graph)


def test_pipeline_block_graph(tiny, a100):
    par = ParallelismConfig(pp=2, num_microbatches=2)
    blocks = {("fwd", s, 0): 1e-3 for s in range(2)}
    blocks.update({("bwd", s, 0): 2e-3 for s in range(2)})
    graph = build_pipeline_graph(tiny, par, blocks)
    graph.check()
    block_nodes = [op for op in graph.nodes if op.kind == NodeKind.BLOCK]
    # forward and backward per stage per microbatch
    assert len(block_nodes) == 2 * 2 * 2
    assert {op.shape.seconds for op in block_nodes} == {1e-3, 2e-3}
    traces = linearize(graph, cost_graph(graph, a100, tiny.dtype))
    check_pairing(traces)
    assert {e.duration for t in traces for e in t.events if e.kind.value == "compute"} >= {1e-3, 2e-3}


def test_tensor_parallel_conserves_gemm_flops(tiny):
    totals = []
    for tp in (1, 2, 4):
        graph = build_layer_graph(tiny, ParallelismConfig(tp=tp), "fwd")
        totals.append(sum(op.shape.flops for op in graph.nodes if op.kind == NodeKind.GEMM))
    assert totals[0] > 0
    assert totals == [totals[0]] * 3


@pytest.mark.parametrize("par", [ParallelismConfig(dp=2), ParallelismConfig(dp=2, tp=2), ParallelismConfig(dp=2, pp=2)])
def test_gradient_sync_payload_matches_static_memory(tiny, a100, par):
    graph = build_full_graph(tiny, par)
    (sync, *_) = [op for op in _collectives(graph) if op.name == "dp_allreduce.grads" and op.rank == 0]
    assert sync.comm.bytes == static_memory(tiny, par, a100, stage=0).grads_bytes


def test_node_count_is_linear_in_layers_and_microbatches(tiny):
    by_layers = [len(build_full_graph(tiny.model_copy(update={"num_layers": n}), ParallelismConfig()))
                 for n in (2, 4, 6)]
    assert by_layers[2] - by_layers[1] == by_layers[1] - by_layers[0] > 0
    by_mb = [len(build_full_graph(tiny, ParallelismConfig(num_microbatches=mb))) for mb in (1, 2, 4)]
    assert by_mb[2] - by_mb[1] == 2 * (by_mb[1] - by_mb[0]) > 0


def test_recompute_waits_for_the_layer_above(tiny):
    model = tiny.model_copy(update={"num_layers": 4})
    graph = build_full_graph(model, ParallelismConfig(recompute="full"))
    position = {nid: i for i, nid in enumerate(graph.rank_order(0))}
    backward = [op for op in graph.nodes if op.phase != PhaseTag.FWD and 0 <= op.layer < model.num_layers]
    for layer in range(model.num_layers - 1):
        replay = [position[op.id] for op in backward if op.layer == layer and op.recompute]
        above = [position[op.id] for op in backward if op.layer == layer + 1 and not op.recompute]
        assert replay and above
        assert min(replay) > max(above)
