import itertools

import networkx as nx
import numpy as np
import pytest

from rapidsim.graph import NodeKind, OperatorGraph, OperatorNode, PhaseTag, build_full_graph
from rapidsim.memmodel import finalize_report, is_feasible, peak_activation, static_memory
from rapidsim.models import MemoryReport
from rapidsim.schema.specs import ParallelismConfig, Recompute, ZeroStage


def test_unsharded_training_state(llama, a100):
    report = static_memory(llama, ParallelismConfig(), a100)
    params = llama.total_params()
    assert report.params_bytes == 2 * params
    assert report.grads_bytes == 2 * params
    assert report.optimizer_bytes == 12 * params
    assert report.kv_cache_bytes == 0
    base = 16 * params
    assert report.total_bytes == base + int(round(base * (a100.memory_overhead - 1.0)))
    assert not report.feasible


def test_zero_stages_shrink_memory(llama, a100):
    totals = [static_memory(llama, ParallelismConfig(dp=8, zero_stage=z), a100).total_bytes for z in ZeroStage]
    assert totals == sorted(totals, reverse=True)
    assert len(set(totals)) == len(totals)


def test_zero_without_replicas_changes_nothing(llama, a100):
    plain = static_memory(llama, ParallelismConfig(pp=2), a100)
    sharded = static_memory(llama, ParallelismConfig(pp=2, zero_stage="z3"), a100)
    assert plain.total_bytes == sharded.total_bytes


def test_tensor_and_pipeline_parallel_split_weights(llama, a100):
    one = static_memory(llama, ParallelismConfig(), a100).params_bytes
    tp = static_memory(llama, ParallelismConfig(tp=4), a100).params_bytes
    pp = static_memory(llama, ParallelismConfig(pp=4), a100)
    assert one / 4 <= tp < one / 3.9
    assert pp.stage in (0, 3)
    assert pp.params_bytes < one / 3


def test_inference_kv_cache(tiny_inference, a100):
    report = static_memory(tiny_inference, ParallelismConfig(), a100)
    m = tiny_inference
    expected = 2 * m.num_layers * (m.prefill_len + m.decode_len) * m.batch_size * m.hidden_dim * 2
    assert report.kv_cache_bytes == expected
    assert report.grads_bytes == 0 and report.optimizer_bytes == 0
    assert static_memory(tiny_inference, ParallelismConfig(tp=2), a100).kv_cache_bytes == expected // 2


def test_finalize_report(a100):
    report = finalize_report(MemoryReport(params_bytes=1000, grads_bytes=1000), a100, activation=2000)
    assert report.peak_activation_bytes == 2000
    assert report.total_bytes == 4000 + report.overhead_bytes
    assert report.overhead_bytes == int(round(4000 * (a100.memory_overhead - 1.0)))
    assert report.headroom_bytes == a100.hbm_capacity - report.total_bytes
    assert report.feasible


def test_recompute_reduces_peak_activation(tiny):
    peaks = {}
    for policy in Recompute:
        graph = build_full_graph(tiny, ParallelismConfig(recompute=policy))
        peaks[policy] = peak_activation(graph, policy, rank=0)
    assert peaks[Recompute.FULL] <= peaks[Recompute.SELECTIVE] <= peaks[Recompute.NONE]
    assert peaks[Recompute.FULL] < peaks[Recompute.NONE]


def test_recompute_policies_strictly_order_deep_models(tiny):
    model = tiny.model_copy(update={"num_layers": 8})
    peaks = [peak_activation(build_full_graph(model, ParallelismConfig(recompute=policy)), policy, rank=0)
             for policy in (Recompute.FULL, Recompute.SELECTIVE, Recompute.NONE)]
    assert peaks[0] < peaks[1] < peaks[2]


def test_recompute_peak_grows_slower_with_depth(tiny):
    def peak(layers, policy):
        model = tiny.model_copy(update={"num_layers": layers})
        return peak_activation(build_full_graph(model, ParallelismConfig(recompute=policy)), policy, rank=0)

    growth = {policy: peak(8, policy) - peak(4, policy) for policy in Recompute}
    assert growth[Recompute.FULL] < growth[Recompute.SELECTIVE] < growth[Recompute.NONE]


def test_peak_activation_positive_and_rank_local(tiny):
    graph = build_full_graph(tiny, ParallelismConfig(dp=2))
    a = peak_activation(graph, rank=0)
    b = peak_activation(graph, rank=1)
    assert a > 0
    # data-parallel replicas are symmetric
    assert a == b
    assert peak_activation(graph, rank=7) == 0


def test_feasibility_against_capacity(tiny, a100):
    par = ParallelismConfig(dp=2)
    graph = build_full_graph(tiny, par)
    report = is_feasible(tiny, par, a100, graph)
    assert report.feasible
    assert report.peak_activation_bytes > 0
    small = a100.model_copy(update={"hbm_capacity": report.total_bytes - 1})
    assert not is_feasible(tiny, par, small, graph).feasible


def test_feasibility_reports_worst_stage(tiny, a100):
    par = ParallelismConfig(pp=2, num_microbatches=2)
    graph = build_full_graph(tiny, par)
    report = is_feasible(tiny, par, a100, graph)
    per_stage = [
        finalize_report(static_memory(tiny, par, a100, stage=s), a100, peak_activation(graph, par.recompute, rank=s))
        for s in range(2)
    ]
    assert report.total_bytes == max(r.total_bytes for r in per_stage)


def _random_dag(rng, size):
    graph = OperatorGraph()
    for i in range(size):
        graph.add_node(OperatorNode(
            i, f"n{i}", NodeKind.POINTWISE, (0,), PhaseTag.FWD, 0, 0,
            out_bytes=int(rng.integers(0, 100)),
            ext_in_bytes=int(rng.integers(0, 50)) if rng.random() < 0.3 else 0,
        ))
    for u, v in itertools.combinations(range(size), 2):
        if rng.random() < 0.3:
            graph.add_edge(u, v)
    return graph


def _simulated_peak(graph, order):
    """Execute `order` step by step, freeing a tensor once every consumer has run."""
    done = set()
    live = set()
    pending_ext = sum(graph.node(n).ext_in_bytes for n in order)
    peak = 0
    for nid in order:
        live.add(nid)
        peak = max(peak, sum(graph.node(v).out_bytes for v in live) + pending_ext)
        done.add(nid)
        pending_ext -= graph.node(nid).ext_in_bytes
        live = {v for v in live if not set(graph.digraph.successors(v)) <= done}
    return peak


def test_peak_activation_matches_step_simulation():
    rng = np.random.default_rng(17)
    for _ in range(30):
        graph = _random_dag(rng, int(rng.integers(1, 13)))
        for order in itertools.islice(nx.all_topological_sorts(graph.digraph), 20):
            assert peak_activation(graph, rank=0, order=order) == _simulated_peak(graph, order)


@pytest.mark.parametrize("axis,values,extra", [
    ("dp", [1, 2, 4, 8], {"zero_stage": "z1"}),
    ("dp", [1, 2, 4, 8], {"zero_stage": "z3"}),
    ("tp", [1, 2, 4, 8], {}),
    ("pp", [1, 2, 4, 8], {}),
])
def test_static_memory_never_grows_with_parallelism(llama, a100, axis, values, extra):
    totals = [static_memory(llama, ParallelismConfig(**{axis: v}, **extra), a100).total_bytes for v in values]
    assert totals == sorted(totals, reverse=True)
