"""Static and activation memory per GPU."""
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from rapidsim.graph import EdgeKind, OperatorGraph, OperatorNode, RankLayout, TensorRole
from rapidsim.models import MemoryReport
from rapidsim.schema.specs import Axis, HardwareSpec, ModelSpec, ParallelismConfig, Phase, Precision, Recompute

logger = logging.getLogger(__name__)

# bytes per parameter: (weights, grads, optimizer state)
MIXED_PRECISION_BYTES = (2, 2, 12)
FP32_BYTES = (4, 4, 8)


def _ceil_div(value: int, parts: int) -> int:
    return math.ceil(value / parts)


def _stage_static(model: ModelSpec, par: ParallelismConfig, hw: HardwareSpec, stage: int) -> MemoryReport:
    params = model.stage_params(par.tp, par.pp, stage)
    # ZeRO shards across every replica of the weights, i.e. the dp x cp group
    shards = par.dp * par.cp
    if model.phase == Phase.TRAIN:
        per_param = FP32_BYTES if model.precision == Precision.FP32 else MIXED_PRECISION_BYTES
        weights, grads, optimizer = (params * b for b in per_param)
        level = par.zero_stage.level
        if level >= 1:
            optimizer = _ceil_div(optimizer, shards)
        if level >= 2:
            grads = _ceil_div(grads, shards)
        if level >= 3:
            weights = _ceil_div(weights, shards)
        kv = 0
    else:
        weights = params * model.bytes_per_elem
        grads = optimizer = 0
        layers = model.num_layers // par.pp
        batch = model.batch_size // par.dp
        kv = 2 * layers * model.context_tokens * batch * model.hidden_dim * model.bytes_per_elem
        kv = _ceil_div(kv, par.tp * par.cp)
    return MemoryReport(
        params_bytes=weights,
        grads_bytes=grads,
        optimizer_bytes=optimizer,
        kv_cache_bytes=kv,
        capacity_bytes=hw.hbm_capacity,
        stage=stage,
    )


def finalize_report(report: MemoryReport, hw: HardwareSpec, activation: Optional[int] = None) -> MemoryReport:
    """Fill overhead, total, feasibility and headroom."""
    base = report.params_bytes + report.grads_bytes + report.optimizer_bytes + report.kv_cache_bytes
    if activation is not None:
        base += activation
    overhead = int(round(base * (hw.memory_overhead - 1.0)))
    total = base + overhead
    return report.model_copy(update={
        "peak_activation_bytes": activation,
        "overhead_bytes": overhead,
        "total_bytes": total,
        "capacity_bytes": hw.hbm_capacity,
        "feasible": total <= hw.hbm_capacity,
        "headroom_bytes": hw.hbm_capacity - total,
    })


def static_memory(model: ModelSpec, par: ParallelismConfig, hw: HardwareSpec,
                  stage: Optional[int] = None) -> MemoryReport:
    """Weights, gradients, optimizer state and KV cache of the heaviest stage (or of `stage`)."""
    stages = [stage] if stage is not None else list(range(par.pp))
    reports = [finalize_report(_stage_static(model, par, hw, s), hw) for s in stages]
    return max(reports, key=lambda r: (r.total_bytes, -r.stage))


# Activation liveness

def _keeps_saved(producer: OperatorNode, policy: Recompute, num_layers: Optional[int]) -> bool:
    """Whether a tensor saved for the backward pass stays resident under `policy`."""
    if policy == Recompute.NONE:
        return True
    in_layer = num_layers is None or 0 <= producer.layer < num_layers
    if not in_layer:
        return True
    if policy == Recompute.SELECTIVE:
        return producer.role != TensorRole.ATTENTION
    return producer.role == TensorRole.BOUNDARY


def peak_activation(
    graph: OperatorGraph,
    recompute: Recompute = Recompute.NONE,
    rank: Optional[int] = None,
    order: Optional[Sequence[int]] = None,
) -> int:
    """Maximum live tensor bytes on `rank` while executing `order`.

    A tensor is live from its producer until its last consumer on the same
    rank. External inputs are live from the start until their consumer.
    Saved-for-backward edges are dropped according to the recompute policy.
    """
    policy = Recompute(recompute)
    if rank is None:
        ranks = graph.ranks
        if not ranks:
            return 0
        rank = ranks[0]
    if order is None:
        order = graph.rank_order(rank)
    else:
        order = [n for n in order if graph.node(n).on_rank(rank)]
    if not order:
        return 0
    num_layers = graph.metadata.get("num_layers")
    pos = {nid: i for i, nid in enumerate(order)}
    diff = np.zeros(len(order) + 1, dtype=np.int64)
    dg = graph.digraph

    for nid in order:
        node = graph.node(nid)
        i = pos[nid]
        if node.ext_in_bytes and node.is_compute:
            diff[0] += node.ext_in_bytes
            diff[i + 1] -= node.ext_in_bytes
        if not node.out_bytes or not node.holds_output(rank):
            continue
        last = i
        for succ in dg.successors(nid):
            if succ not in pos:
                continue
            kind = dg.edges[nid, succ]["kind"]
            if kind == EdgeKind.CONTROL:
                continue
            if kind == EdgeKind.SAVED and not _keeps_saved(node, policy, num_layers):
                continue
            last = max(last, pos[succ])
        diff[i] += node.out_bytes
        diff[last + 1] -= node.out_bytes
    return int(np.cumsum(diff[:-1]).max())


def _representative_ranks(graph: OperatorGraph, par: ParallelismConfig) -> Dict[int, int]:
    """One rank per pipeline stage; tp and cp peers are symmetric."""
    layout = RankLayout(par)
    chosen: Dict[int, tuple] = {}
    for r in graph.ranks:
        c = layout.coords(r)
        key = (c[Axis.TP], c[Axis.CP], c[Axis.DP], r)
        stage = c[Axis.PP]
        if stage not in chosen or key < chosen[stage]:
            chosen[stage] = key
    return {stage: key[-1] for stage, key in chosen.items()}


def is_feasible(model: ModelSpec, par: ParallelismConfig, hw: HardwareSpec, graph: OperatorGraph) -> MemoryReport:
    """Worst stage of static plus peak activation memory against HBM capacity."""
    reports: List[MemoryReport] = []
    for stage, rank in sorted(_representative_ranks(graph, par).items()):
        activation = peak_activation(graph, par.recompute, rank=rank)
        reports.append(finalize_report(_stage_static(model, par, hw, stage), hw, activation))
    if not reports:
        return static_memory(model, par, hw)
    worst = max(reports, key=lambda r: (r.total_bytes, -r.stage))
    if not worst.feasible:
        logger.info(
            f"[is_feasible] {par.config_id}: stage {worst.stage} needs {worst.total_bytes} bytes, "
            f"capacity {hw.hbm_capacity}"
        )
    return worst
