"""Operator-level computation graphs for transformer training and inference.

A graph holds one node per compute kernel per rank, one node per collective
(shared by every rank of its group) and one node per point-to-point transfer.
Edges are data dependencies (`DATA`), forward activations kept for the
backward pass (`SAVED`), and pure ordering constraints (`CONTROL`).
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx

from rapidsim.config import get_decode_bucket_ratio
from rapidsim.errors import GraphCycleError, ShardingError, SimulationError
from rapidsim.schema.specs import Axis, ModelSpec, ParallelismConfig, Phase, Precision, Recompute, ZeroStage
from rapidsim.specs import axis_strides

logger = logging.getLogger(__name__)


class NodeKind(str, Enum):
    GEMM = "gemm"
    FLASH_ATTENTION = "flash_attention"
    POINTWISE = "pointwise"
    EMBEDDING = "embedding"
    COLLECTIVE = "collective"
    P2P = "p2p"
    # a whole pipeline-stage block with a precomputed duration (hierarchical mode)
    BLOCK = "block"


COMPUTE_KINDS = frozenset(
    {NodeKind.GEMM, NodeKind.FLASH_ATTENTION, NodeKind.POINTWISE, NodeKind.EMBEDDING, NodeKind.BLOCK}
)
COMM_KINDS = frozenset({NodeKind.COLLECTIVE, NodeKind.P2P})


class PhaseTag(str, Enum):
    FWD = "fwd"
    BWD_ACT = "bwd_act"
    BWD_WT = "bwd_wt"
    PREFILL = "prefill"
    DECODE = "decode"


PHASE_ORDER = {PhaseTag.FWD: 0, PhaseTag.PREFILL: 0, PhaseTag.DECODE: 1, PhaseTag.BWD_ACT: 1, PhaseTag.BWD_WT: 2}


class CollectiveKind(str, Enum):
    ALL_REDUCE = "AllReduce"
    ALL_GATHER = "AllGather"
    REDUCE_SCATTER = "ReduceScatter"
    ALL_TO_ALL = "AllToAll"
    SEND_RECV = "SendRecv"


class TensorRole(str, Enum):
    """How a forward output is treated by recomputation policies."""
    REGULAR = "regular"
    BOUNDARY = "boundary"  # layer input/output, kept by every policy
    ATTENTION = "attention"  # attention internals, dropped by selective and full


class EdgeKind(str, Enum):
    DATA = "data"
    SAVED = "saved"
    CONTROL = "control"


class Direction(str, Enum):
    FWD = "fwd"
    BWD = "bwd"


class ParallelAxis(str, Enum):
    DP = "DP"
    TP = "TP"
    PP = "PP"
    SP = "SP"
    CP = "CP"


_COMM_PATTERNS = {
    (ParallelAxis.DP, Direction.FWD): [],
    (ParallelAxis.DP, Direction.BWD): [CollectiveKind.ALL_REDUCE],
    (ParallelAxis.TP, Direction.FWD): [CollectiveKind.ALL_GATHER, CollectiveKind.ALL_REDUCE],
    (ParallelAxis.TP, Direction.BWD): [CollectiveKind.ALL_REDUCE],
    (ParallelAxis.PP, Direction.FWD): [CollectiveKind.SEND_RECV],
    (ParallelAxis.PP, Direction.BWD): [CollectiveKind.SEND_RECV],
    (ParallelAxis.SP, Direction.FWD): [CollectiveKind.ALL_GATHER, CollectiveKind.REDUCE_SCATTER],
    (ParallelAxis.SP, Direction.BWD): [CollectiveKind.ALL_GATHER, CollectiveKind.REDUCE_SCATTER],
    # KV block exchange is the alternative; graphs use the all-to-all
    (ParallelAxis.CP, Direction.FWD): [CollectiveKind.ALL_TO_ALL],
    (ParallelAxis.CP, Direction.BWD): [CollectiveKind.ALL_TO_ALL],
}


def comm_pattern_for(axis: Union[ParallelAxis, str], direction: Union[Direction, str]) -> List[CollectiveKind]:
    """Dominant collectives a parallelism axis issues in one direction."""
    axis = ParallelAxis(axis.upper() if isinstance(axis, str) else axis)
    direction = Direction(direction)
    return list(_COMM_PATTERNS[(axis, direction)])


# Shapes

@dataclass(frozen=True)
class GemmShape:
    m: int
    n: int
    k: int
    batch: int = 1

    @property
    def flops(self) -> int:
        return 2 * self.batch * self.m * self.n * self.k


@dataclass(frozen=True)
class AttentionShape:
    batch: int
    heads: int
    q_len: int
    kv_len: int
    head_dim: int
    backward: bool = False


@dataclass(frozen=True)
class PointwiseShape:
    elems: int
    bytes_per_elem: int
    flops_per_elem: float = 1.0
    reads: int = 1
    writes: int = 1


@dataclass(frozen=True)
class BlockShape:
    seconds: float


Shape = Union[GemmShape, AttentionShape, PointwiseShape, BlockShape]


@dataclass(frozen=True)
class CommSpec:
    kind: CollectiveKind
    bytes: int
    ranks: Tuple[int, ...]
    axis: str


@dataclass(frozen=True)
class OperatorNode:
    id: int
    name: str
    kind: NodeKind
    ranks: Tuple[int, ...]
    phase: PhaseTag
    layer: int
    microbatch: int
    shape: Optional[Shape] = None
    comm: Optional[CommSpec] = None
    out_bytes: int = 0
    ext_in_bytes: int = 0
    role: TensorRole = TensorRole.REGULAR
    recompute: bool = False
    repeat: int = 1

    @property
    def rank(self) -> int:
        """Owning rank of a compute node; sender of a p2p node."""
        return self.ranks[0]

    @property
    def is_compute(self) -> bool:
        return self.kind in COMPUTE_KINDS

    def on_rank(self, rank: int) -> bool:
        return rank in self.ranks

    def holds_output(self, rank: int) -> bool:
        """Whether this node's output tensor lives on `rank`."""
        if self.kind == NodeKind.P2P:
            return rank == self.ranks[1]
        return rank in self.ranks


class OperatorGraph:
    """DAG of operator nodes with deterministic linearization."""

    def __init__(self, metadata: Optional[Dict[str, Any]] = None):
        self._g = nx.DiGraph()
        self.metadata: Dict[str, Any] = dict(metadata or {})
        self._order: Optional[List[int]] = None

    def add_node(self, node: OperatorNode) -> int:
        self._g.add_node(node.id, op=node)
        self._order = None
        return node.id

    def add_edge(self, src: int, dst: int, kind: EdgeKind = EdgeKind.DATA) -> None:
        if self._g.has_edge(src, dst):
            # data dominates control, saved dominates data
            rank = {EdgeKind.CONTROL: 0, EdgeKind.DATA: 1, EdgeKind.SAVED: 2}
            if rank[kind] <= rank[self._g.edges[src, dst]["kind"]]:
                return
        self._g.add_edge(src, dst, kind=kind)
        self._order = None

    def __len__(self) -> int:
        return self._g.number_of_nodes()

    @property
    def digraph(self) -> nx.DiGraph:
        return self._g

    def node(self, node_id: int) -> OperatorNode:
        return self._g.nodes[node_id]["op"]

    @property
    def nodes(self) -> List[OperatorNode]:
        return [self._g.nodes[n]["op"] for n in sorted(self._g.nodes)]

    def edges(self) -> List[Tuple[int, int, EdgeKind]]:
        return sorted((u, v, d["kind"]) for u, v, d in self._g.edges(data=True))

    def edge_kind(self, src: int, dst: int) -> EdgeKind:
        return self._g.edges[src, dst]["kind"]

    def predecessors(self, node_id: int) -> List[int]:
        return sorted(self._g.predecessors(node_id))

    def successors(self, node_id: int) -> List[int]:
        return sorted(self._g.successors(node_id))

    @property
    def ranks(self) -> List[int]:
        seen = set()
        for n in self._g.nodes:
            seen.update(self._g.nodes[n]["op"].ranks)
        return sorted(seen)

    def _sort_key(self, node_id: int) -> Tuple[int, int, int]:
        op = self._g.nodes[node_id]["op"]
        return (PHASE_ORDER[op.phase], op.layer, node_id)

    def order(self) -> List[int]:
        """Global topological order, ties broken by (phase, layer, node id)."""
        if self._order is None:
            try:
                self._order = list(nx.lexicographical_topological_sort(self._g, key=self._sort_key))
            except nx.NetworkXUnfeasible:
                raise GraphCycleError(nx.find_cycle(self._g))
        return self._order

    def rank_order(self, rank: int) -> List[int]:
        return [n for n in self.order() if self._g.nodes[n]["op"].on_rank(rank)]

    def check(self) -> None:
        """Raise if the graph breaks a structural invariant."""
        self.order()
        for op in self.nodes:
            if op.is_compute and len(op.ranks) != 1:
                raise SimulationError(f"compute node {op.id} ({op.name}) has {len(op.ranks)} ranks")
            if op.kind == NodeKind.COLLECTIVE and (op.comm is None or op.comm.bytes <= 0):
                raise SimulationError(f"collective {op.id} ({op.name}) carries no bytes")
            if isinstance(op.shape, GemmShape) and min(op.shape.m, op.shape.n, op.shape.k) < 1:
                raise SimulationError(f"gemm {op.id} ({op.name}) has a zero dimension")
        for u, v, _ in self.edges():
            a, b = self.node(u), self.node(v)
            if a.is_compute and b.is_compute and a.rank != b.rank:
                raise SimulationError(f"edge {u}->{v} crosses ranks without a communication node")

    def to_text(self) -> str:
        """Dependency-list dump: one node per line, then its predecessors."""
        lines = [f"# graph {self.metadata.get('phase', '')} nodes={len(self)} edges={self._g.number_of_edges()}"]
        for nid in self.order():
            op = self.node(nid)
            deps = ",".join(
                f"{p}{'' if self.edge_kind(p, nid) == EdgeKind.DATA else ':' + self.edge_kind(p, nid).value}"
                for p in self.predecessors(nid)
            )
            detail = ""
            if op.comm is not None:
                detail = f" {op.comm.kind.value} bytes={op.comm.bytes} axis={op.comm.axis}"
            elif op.shape is not None:
                detail = " " + " ".join(f"{k}={v}" for k, v in vars(op.shape).items())
            ranks = ",".join(str(r) for r in op.ranks)
            lines.append(
                f"{nid} {op.kind.value} {op.name} ranks={ranks} phase={op.phase.value} "
                f"layer={op.layer} mb={op.microbatch}{detail} <- [{deps}]"
            )
        return "\n".join(lines) + "\n"


# Rank layout

class RankLayout:
    """Maps (tp, cp, dp, pp) coordinates to ranks using the configured axis order."""

    def __init__(self, par: ParallelismConfig):
        self.par = par
        self.strides = axis_strides(par)

    def rank(self, tp: int = 0, cp: int = 0, dp: int = 0, pp: int = 0) -> int:
        s = self.strides
        return tp * s[Axis.TP] + cp * s[Axis.CP] + dp * s[Axis.DP] + pp * s[Axis.PP]

    def coords(self, rank: int) -> Dict[Axis, int]:
        return {a: (rank // self.strides[a]) % self.par.degree(a) for a in Axis}

    def group(self, rank: int, *axes: Axis) -> Tuple[int, ...]:
        """Ranks that differ from `rank` only along `axes`."""
        base = self.coords(rank)
        members = [dict(base)]
        for axis in axes:
            members = [{**m, axis: i} for m in members for i in range(self.par.degree(axis))]
        return tuple(sorted(self.rank(m[Axis.TP], m[Axis.CP], m[Axis.DP], m[Axis.PP]) for m in members))

    def stage_ranks(self, dp: int, pp: int) -> List[int]:
        return [
            self.rank(t, c, dp, pp)
            for c in range(self.par.cp)
            for t in range(self.par.tp)
        ]


def check_sharding(model: ModelSpec, par: ParallelismConfig) -> None:
    """Raise ShardingError naming the axis whose degree does not divide its dimension."""
    if model.num_heads % par.tp or model.hidden_dim % par.tp or model.ffn_dim % par.tp:
        raise ShardingError(
            "tp", f"tp={par.tp} must divide num_heads={model.num_heads}, "
                  f"hidden_dim={model.hidden_dim} and ffn_dim={model.ffn_dim}"
        )
    if model.num_layers % par.pp:
        raise ShardingError("pp", f"pp={par.pp} must divide num_layers={model.num_layers}")
    seq = model.seq_len if model.phase == Phase.TRAIN else model.prefill_len
    if seq % par.cp:
        raise ShardingError("cp", f"cp={par.cp} must divide the sequence length {seq}")
    if model.batch_size % (par.dp * par.num_microbatches):
        raise ShardingError(
            "dp", f"dp*num_microbatches={par.dp * par.num_microbatches} must divide batch_size={model.batch_size}"
        )
    if par.sp_enabled and par.tp > 1:
        tokens = (model.batch_size // (par.dp * par.num_microbatches)) * (seq // par.cp)
        if tokens % par.tp:
            raise ShardingError("sp", f"tp={par.tp} must divide the {tokens} tokens of a microbatch")


def decode_buckets(prefill_len: int, decode_len: int, ratio: float, exact: bool) -> List[Tuple[int, int]]:
    """Group decode steps into (kv_len, steps) passes.

    Step k (1-based) attends over prefill_len + k positions. Buckets grow
    geometrically in KV length; each is simulated once at its mean length.
    """
    if decode_len <= 0:
        return []
    if exact:
        return [(prefill_len + k, 1) for k in range(1, decode_len + 1)]
    buckets = []
    k = 1
    while k <= decode_len:
        lo = prefill_len + k
        hi = max(lo + 1, math.ceil(lo * ratio))
        last = min(decode_len, hi - prefill_len - 1)
        steps = last - k + 1
        mean_kv = prefill_len + (k + last) / 2.0
        buckets.append((int(round(mean_kv)), steps))
        k = last + 1
    if len(buckets) < decode_len:
        logger.info(f"[decode_buckets] {decode_len} decode steps grouped into {len(buckets)} pass(es), ratio {ratio:g}")
    return buckets


@dataclass(frozen=True)
class _Pass:
    """One forward sweep through the model for one microbatch."""
    phase: PhaseTag
    tokens: int  # rows per rank entering the layer GEMMs
    q_len: int
    kv_len: int
    batch: int
    head_tokens: int
    decode: bool = False
    repeat: int = 1
    index: int = 0


BlockKey = Tuple[Any, ...]
RankMap = Dict[int, int]


class _GraphBuilder:
    """Emits nodes for one model/parallelism pair into an OperatorGraph."""

    def __init__(
        self,
        model: ModelSpec,
        par: ParallelismConfig,
        *,
        exact_decode: bool = False,
        decode_bucket_ratio: Optional[float] = None,
        replicas: Optional[Sequence[int]] = None,
        block_seconds: Optional[Mapping[BlockKey, float]] = None,
    ):
        check_sharding(model, par)
        self.model = model
        self.par = par
        self.layout = RankLayout(par)
        self.exact_decode = exact_decode
        self.bucket_ratio = decode_bucket_ratio or get_decode_bucket_ratio()
        self.replicas = list(range(par.dp)) if replicas is None else list(replicas)
        self.block_seconds = block_seconds
        self.graph = OperatorGraph(
            {"model": model.name, "parallelism": par.config_id, "phase": model.phase.value,
             "num_layers": model.num_layers}
        )
        self.eb = model.bytes_per_elem
        self.h = model.hidden_dim
        self.layers_per_stage = model.num_layers // par.pp
        self._sp_base = par.sp_enabled and par.tp > 1
        self.sp = self._sp_base
        self.mb_batch = model.batch_size // (par.dp * par.num_microbatches)
        self._next_id = 0
        self._block: Optional[BlockKey] = None
        self._members: Dict[Tuple[int, BlockKey], List[int]] = defaultdict(list)
        self._schedule: Dict[int, List[BlockKey]] = defaultdict(list)
        self._ctx: Dict[str, Any] = {}

    # Node helpers

    def _add(self, **fields: Any) -> int:
        nid = self._next_id
        self._next_id += 1
        ctx = self._ctx
        fields.setdefault("phase", ctx["phase"])
        fields.setdefault("layer", ctx["layer"])
        fields.setdefault("microbatch", ctx["mb"])
        fields.setdefault("repeat", ctx.get("repeat", 1))
        fields.setdefault("recompute", ctx.get("recompute", False))
        node = OperatorNode(id=nid, **fields)
        self.graph.add_node(node)
        if self._block is not None:
            members = node.ranks if node.kind != NodeKind.P2P else ()
            for r in members:
                self._members[(r, self._block)].append(nid)
        return nid

    def _wire(self, nid: int, inputs: Iterable[Union[int, Tuple[int, EdgeKind], None]]) -> None:
        for item in inputs:
            if item is None:
                continue
            if isinstance(item, tuple):
                self.graph.add_edge(item[0], nid, item[1])
            else:
                self.graph.add_edge(item, nid, EdgeKind.DATA)

    def compute(
        self,
        rank: int,
        kind: NodeKind,
        name: str,
        shape: Shape,
        inputs: Iterable[Union[int, Tuple[int, EdgeKind], None]] = (),
        out_bytes: int = 0,
        role: TensorRole = TensorRole.REGULAR,
        ext_in_bytes: int = 0,
        **extra: Any,
    ) -> int:
        nid = self._add(
            name=name, kind=kind, ranks=(rank,), shape=shape, out_bytes=int(out_bytes),
            role=role, ext_in_bytes=int(ext_in_bytes), **extra,
        )
        self._wire(nid, inputs)
        return nid

    def collective(
        self,
        kind: CollectiveKind,
        name: str,
        group: Sequence[int],
        nbytes: int,
        inputs: Mapping[int, Any],
        axis: str,
        out_bytes: int,
        role: TensorRole = TensorRole.REGULAR,
        **extra: Any,
    ) -> int:
        ranks = tuple(sorted(group))
        nid = self._add(
            name=name, kind=NodeKind.COLLECTIVE, ranks=ranks,
            comm=CommSpec(kind, int(nbytes), ranks, axis), out_bytes=int(out_bytes), role=role, **extra,
        )
        for r in ranks:
            src = inputs.get(r)
            if isinstance(src, list):
                self._wire(nid, src)
            else:
                self._wire(nid, [src])
        return nid

    def p2p(
        self, name: str, src: int, dst: int, nbytes: int, producer: Optional[int],
        role: TensorRole = TensorRole.REGULAR, **extra: Any,
    ) -> int:
        nid = self._add(
            name=name, kind=NodeKind.P2P, ranks=(src, dst),
            comm=CommSpec(CollectiveKind.SEND_RECV, int(nbytes), (src, dst), "pp"),
            out_bytes=int(nbytes), role=role, **extra,
        )
        self._wire(nid, [producer])
        return nid

    def _join(self, rank: int, block: BlockKey, nid: int) -> None:
        self._members[(rank, block)].append(nid)

    # Groups

    def tp_groups(self, ranks: Sequence[int]) -> List[List[int]]:
        return self._groups(ranks, Axis.TP)

    def cp_groups(self, ranks: Sequence[int]) -> List[List[int]]:
        return self._groups(ranks, Axis.CP)

    def _groups(self, ranks: Sequence[int], axis: Axis) -> List[List[int]]:
        seen: Dict[Tuple[int, ...], List[int]] = {}
        for r in ranks:
            g = self.layout.group(r, axis)
            seen.setdefault(g, list(g))
        return list(seen.values())

    def _tp_collective(
        self, kind: CollectiveKind, name: str, ranks: Sequence[int], inputs: RankMap,
        full_bytes: int, out_bytes: int, role: TensorRole = TensorRole.REGULAR,
    ) -> RankMap:
        out: RankMap = {}
        for group in self.tp_groups(ranks):
            nid = self.collective(kind, name, group, full_bytes, inputs, "tp", out_bytes, role)
            out.update({r: nid for r in group})
        return out

    def _tp_reduce(self, name: str, ranks: Sequence[int], inputs: RankMap, full_bytes: int,
                   sharded_bytes: int, role: TensorRole = TensorRole.REGULAR) -> RankMap:
        """AllReduce, or ReduceScatter when sequence parallelism shards the result."""
        if self.par.tp == 1:
            return inputs
        if self.sp:
            return self._tp_collective(CollectiveKind.REDUCE_SCATTER, name, ranks, inputs,
                                       full_bytes, sharded_bytes, role)
        return self._tp_collective(CollectiveKind.ALL_REDUCE, name, ranks, inputs, full_bytes, full_bytes, role)

    def _sp_gather(self, name: str, ranks: Sequence[int], inputs: RankMap, full_bytes: int) -> RankMap:
        if not self.sp:
            return inputs
        return self._tp_collective(CollectiveKind.ALL_GATHER, name, ranks, inputs, full_bytes, full_bytes)

    # Layer forward

    def layer_forward(
        self, ranks: Sequence[int], p: _Pass, layer: int, x: Optional[RankMap],
        saved_x: Optional[RankMap] = None, recompute: bool = False,
    ) -> Tuple[RankMap, Dict[str, RankMap]]:
        """One transformer layer. Returns the layer output and tensors the backward pass reads."""
        m, par, eb, h = self.model, self.par, self.eb, self.h
        tp = par.tp
        self._ctx.update(layer=layer, recompute=recompute)
        T = p.tokens
        t_sp = T // tp if self.sp else T
        ffn_shard = m.ffn_dim // tp
        up_width = (2 if m.gated_ffn else 1) * ffn_shard
        tag = "recompute." if recompute else ""
        act_bytes = t_sp * h * eb

        def edge(src_map: Optional[RankMap], r: int, kind: EdgeKind = EdgeKind.DATA):
            if src_map is None:
                return None
            return (src_map[r], kind)

        x_kind = EdgeKind.SAVED if recompute else EdgeKind.DATA
        x_map = saved_x if recompute else x
        ext = act_bytes if x_map is None else 0

        ln1 = {r: self.compute(r, NodeKind.POINTWISE, f"{tag}ln1",
                               PointwiseShape(t_sp * h, eb, 5.0, 1, 1),
                               [edge(x_map, r, x_kind)], out_bytes=act_bytes, ext_in_bytes=ext)
               for r in ranks}
        a1 = self._sp_gather(f"{tag}sp_allgather.attn", ranks, ln1, T * h * eb)
        qkv = {r: self.compute(r, NodeKind.GEMM, f"{tag}qkv_proj", GemmShape(T, 3 * h // tp, h),
                               [a1[r]], out_bytes=T * 3 * h // tp * eb)
               for r in ranks}

        kv_bytes = 2 * T * (h // tp) * eb
        kvx: Optional[RankMap] = None
        if par.cp > 1 and not p.decode:
            kvx = {}
            for group in self.cp_groups(ranks):
                nid = self.collective(CollectiveKind.ALL_TO_ALL, f"{tag}cp_kv_exchange", group,
                                      par.cp * kv_bytes, qkv, "cp", par.cp * kv_bytes)
                kvx.update({r: nid for r in group})

        kv_len = math.ceil(p.kv_len / par.cp) if p.decode else p.kv_len
        attn_shape = AttentionShape(p.batch, m.num_heads // tp, p.q_len, kv_len, m.head_dim)
        attn = {r: self.compute(r, NodeKind.FLASH_ATTENTION, f"{tag}attention", attn_shape,
                                [qkv[r], kvx[r] if kvx else None], out_bytes=T * (h // tp) * eb,
                                role=TensorRole.ATTENTION)
                for r in ranks}
        if par.cp > 1 and p.decode:
            # combine partial attention over the KV shards
            combined: RankMap = {}
            for group in self.cp_groups(ranks):
                nbytes = par.cp * T * (h // tp) * eb
                nid = self.collective(CollectiveKind.ALL_TO_ALL, f"{tag}cp_attn_combine", group,
                                      nbytes, attn, "cp", T * (h // tp) * eb, TensorRole.ATTENTION)
                combined.update({r: nid for r in group})
            attn = combined

        proj = {r: self.compute(r, NodeKind.GEMM, f"{tag}out_proj", GemmShape(T, h, h // tp),
                                [attn[r]], out_bytes=T * h * eb)
                for r in ranks}
        c1 = self._tp_reduce(f"{tag}tp_reduce.attn", ranks, proj, T * h * eb, act_bytes)
        res1 = {r: self.compute(r, NodeKind.POINTWISE, f"{tag}residual1",
                                PointwiseShape(t_sp * h, eb, 1.0, 2, 1),
                                [c1[r], edge(x_map, r, x_kind)], out_bytes=act_bytes)
                for r in ranks}

        ln2 = {r: self.compute(r, NodeKind.POINTWISE, f"{tag}ln2", PointwiseShape(t_sp * h, eb, 5.0, 1, 1),
                               [res1[r]], out_bytes=act_bytes)
               for r in ranks}
        a2 = self._sp_gather(f"{tag}sp_allgather.mlp", ranks, ln2, T * h * eb)
        fc1 = {r: self.compute(r, NodeKind.GEMM, f"{tag}fc1", GemmShape(T, up_width, h),
                               [a2[r]], out_bytes=T * up_width * eb)
               for r in ranks}
        act = {r: self.compute(r, NodeKind.POINTWISE, f"{tag}activation",
                               PointwiseShape(T * ffn_shard, eb, 8.0, 2 if m.gated_ffn else 1, 1),
                               [fc1[r]], out_bytes=T * ffn_shard * eb)
               for r in ranks}
        fc2 = {r: self.compute(r, NodeKind.GEMM, f"{tag}fc2", GemmShape(T, h, ffn_shard),
                               [act[r]], out_bytes=T * h * eb)
               for r in ranks}
        c2 = self._tp_reduce(f"{tag}tp_reduce.mlp", ranks, fc2, T * h * eb, act_bytes)
        out = {r: self.compute(r, NodeKind.POINTWISE, f"{tag}residual2",
                               PointwiseShape(t_sp * h, eb, 1.0, 2, 1),
                               [c2[r], res1[r]], out_bytes=act_bytes, role=TensorRole.BOUNDARY)
               for r in ranks}
        saved = {"x": x_map, "ln1": ln1, "a1": a1, "qkv": qkv, "kvx": kvx, "attn": attn,
                 "res1": res1, "ln2": ln2, "a2": a2, "fc1": fc1, "act": act}
        return out, saved

    # Layer backward

    def layer_backward(
        self, ranks: Sequence[int], p: _Pass, layer: int, g: Optional[RankMap],
        saved: Optional[Dict[str, Optional[RankMap]]], after: Optional[Dict[int, List[int]]] = None,
    ) -> Tuple[RankMap, Dict[int, List[int]]]:
        """Activation and weight gradients of one layer.

        `saved` holds the forward tensors (None for a standalone layer graph,
        whose saved activations are then external inputs). `after` lists nodes
        per rank that must finish before this layer starts.
        """
        m, par, eb, h = self.model, self.par, self.eb, self.h
        tp = par.tp
        T = p.tokens
        t_sp = T // tp if self.sp else T
        ffn_shard = m.ffn_dim // tp
        up_width = (2 if m.gated_ffn else 1) * ffn_shard
        act_bytes = t_sp * h * eb
        policy = par.recompute

        recomputed: Dict[str, Optional[RankMap]] = {}
        self._ctx.update(layer=layer, phase=PhaseTag.BWD_ACT)
        if policy == Recompute.FULL:
            self._ctx["phase"] = PhaseTag.BWD_ACT
            _, recomputed = self.layer_forward(
                ranks, p, layer, None, saved_x=saved["x"] if saved else None, recompute=True
            )
            self._ctx.update(phase=PhaseTag.BWD_ACT, recompute=False)
        elif policy == Recompute.SELECTIVE:
            self._ctx.update(recompute=True)
            attn_shape = AttentionShape(p.batch, m.num_heads // tp, p.q_len, p.kv_len, m.head_dim)
            attn_r = {}
            for r in ranks:
                inputs = []
                if saved:
                    inputs = [(saved["qkv"][r], EdgeKind.SAVED)]
                    if saved.get("kvx"):
                        inputs.append((saved["kvx"][r], EdgeKind.SAVED))
                attn_r[r] = self.compute(
                    r, NodeKind.FLASH_ATTENTION, "recompute.attention", attn_shape, inputs,
                    out_bytes=T * (h // tp) * eb, role=TensorRole.ATTENTION,
                    ext_in_bytes=0 if saved else T * 3 * h // tp * eb,
                )
            recomputed = {"attn": attn_r}
            self._ctx.update(recompute=False)
        if policy != Recompute.NONE:
            self._gate_recompute(ranks, recomputed["ln1" if policy == Recompute.FULL else "attn"], g, after)

        sizes = {
            "x": act_bytes, "ln1": act_bytes, "a1": T * h * eb, "qkv": T * 3 * h // tp * eb,
            "kvx": par.cp * 2 * T * (h // tp) * eb, "attn": T * (h // tp) * eb, "res1": act_bytes,
            "ln2": act_bytes, "a2": T * h * eb, "fc1": T * up_width * eb, "act": T * ffn_shard * eb,
        }
        ext_used = set()

        def use(name: str, r: int) -> Tuple[List[Tuple[int, EdgeKind]], int]:
            """Edges that deliver forward tensor `name`, plus external bytes if none exist."""
            edges: List[Tuple[int, EdgeKind]] = []
            fresh = recomputed.get(name)
            if fresh is not None:
                edges.append((fresh[r], EdgeKind.DATA))
            held = saved.get(name) if saved else None
            if held is not None:
                edges.append((held[r], EdgeKind.SAVED))
            if edges:
                return edges, 0
            if name == "kvx" or (r, name) in ext_used:
                return edges, 0
            ext_used.add((r, name))
            return edges, sizes[name]

        def node(r: int, kind: NodeKind, name: str, shape: Shape, inputs: List[Any],
                 fwd: Sequence[str], out_bytes: int = 0, phase: PhaseTag = PhaseTag.BWD_ACT) -> int:
            ext = 0
            for tensor in fwd:
                edges, extra = use(tensor, r)
                inputs = inputs + edges
                ext += extra
            self._ctx["phase"] = phase
            nid = self.compute(r, kind, name, shape, inputs, out_bytes=out_bytes, ext_in_bytes=ext)
            self._ctx["phase"] = PhaseTag.BWD_ACT
            return nid

        grad_ext = {r: act_bytes if g is None else 0 for r in ranks}
        g_in = g or {}

        # MLP block
        first: Dict[int, int] = {}
        gy = g_in
        if self.sp:
            gy = self._tp_collective(CollectiveKind.ALL_GATHER, "sp_allgather.mlp_grad", ranks,
                                     g_in, T * h * eb, T * h * eb)
            for r in ranks:
                first[r] = gy[r]
        wgrads: Dict[int, List[int]] = defaultdict(list)
        fc2_d = {}
        for r in ranks:
            fc2_d[r] = self.compute(r, NodeKind.GEMM, "fc2.dgrad", GemmShape(T, ffn_shard, h),
                                    [gy.get(r)], out_bytes=T * ffn_shard * eb,
                                    ext_in_bytes=0 if self.sp else grad_ext[r])
            first.setdefault(r, fc2_d[r])
            wgrads[r].append(node(r, NodeKind.GEMM, "fc2.wgrad", GemmShape(ffn_shard, h, T),
                                  [gy.get(r)], ["act"], phase=PhaseTag.BWD_WT))
        if after:
            for r in ranks:
                for prev in after.get(r, []):
                    self.graph.add_edge(prev, first[r], EdgeKind.CONTROL)
        act_b = {r: node(r, NodeKind.POINTWISE, "activation.bwd",
                         PointwiseShape(T * up_width, eb, 8.0, 2, 1), [fc2_d[r]], ["fc1"],
                         out_bytes=T * up_width * eb)
                 for r in ranks}
        fc1_d = {}
        for r in ranks:
            fc1_d[r] = self.compute(r, NodeKind.GEMM, "fc1.dgrad", GemmShape(T, h, up_width),
                                    [act_b[r]], out_bytes=T * h * eb)
            wgrads[r].append(node(r, NodeKind.GEMM, "fc1.wgrad", GemmShape(h, up_width, T),
                                  [act_b[r]], ["a2"], phase=PhaseTag.BWD_WT))
        c2 = self._tp_reduce("tp_reduce.mlp_grad", ranks, fc1_d, T * h * eb, act_bytes)
        ln2_b = {r: node(r, NodeKind.POINTWISE, "ln2.bwd", PointwiseShape(t_sp * h, eb, 8.0, 2, 1),
                         [c2[r]], ["res1"], out_bytes=act_bytes)
                 for r in ranks}
        g1 = {r: self.compute(r, NodeKind.POINTWISE, "residual1.bwd", PointwiseShape(t_sp * h, eb, 1.0, 2, 1),
                              [ln2_b[r], g_in.get(r)], out_bytes=act_bytes)
              for r in ranks}

        # Attention block
        gf = self._sp_gather("sp_allgather.attn_grad", ranks, g1, T * h * eb)
        proj_d = {}
        for r in ranks:
            proj_d[r] = self.compute(r, NodeKind.GEMM, "out_proj.dgrad", GemmShape(T, h // tp, h),
                                     [gf[r]], out_bytes=T * (h // tp) * eb)
            wgrads[r].append(node(r, NodeKind.GEMM, "out_proj.wgrad", GemmShape(h // tp, h, T),
                                  [gf[r]], ["attn"], phase=PhaseTag.BWD_WT))
        attn_shape = AttentionShape(p.batch, m.num_heads // tp, p.q_len, p.kv_len, m.head_dim, backward=True)
        attn_b = {r: node(r, NodeKind.FLASH_ATTENTION, "attention.bwd", attn_shape, [proj_d[r]],
                          ["qkv", "kvx", "attn"], out_bytes=T * 3 * h // tp * eb)
                  for r in ranks}
        if par.cp > 1:
            exchanged: RankMap = {}
            for group in self.cp_groups(ranks):
                nbytes = par.cp * 2 * T * (h // tp) * eb
                nid = self.collective(CollectiveKind.ALL_TO_ALL, "cp_kv_grad_exchange", group,
                                      nbytes, attn_b, "cp", T * 3 * h // tp * eb)
                exchanged.update({r: nid for r in group})
            attn_b = exchanged
        qkv_d = {}
        for r in ranks:
            qkv_d[r] = self.compute(r, NodeKind.GEMM, "qkv_proj.dgrad", GemmShape(T, h, 3 * h // tp),
                                    [attn_b[r]], out_bytes=T * h * eb)
            wgrads[r].append(node(r, NodeKind.GEMM, "qkv_proj.wgrad", GemmShape(h, 3 * h // tp, T),
                                  [attn_b[r]], ["a1"], phase=PhaseTag.BWD_WT))
        c1 = self._tp_reduce("tp_reduce.attn_grad", ranks, qkv_d, T * h * eb, act_bytes)
        ln1_b = {r: node(r, NodeKind.POINTWISE, "ln1.bwd", PointwiseShape(t_sp * h, eb, 8.0, 2, 1),
                         [c1[r]], ["x"], out_bytes=act_bytes)
                 for r in ranks}
        g0 = {r: self.compute(r, NodeKind.POINTWISE, "residual0.bwd", PointwiseShape(t_sp * h, eb, 1.0, 2, 1),
                              [ln1_b[r], g1[r]], out_bytes=act_bytes)
              for r in ranks}
        return g0, dict(wgrads)

    def _gate_recompute(self, ranks: Sequence[int], entry: RankMap, g: Optional[RankMap],
                        after: Optional[Dict[int, List[int]]]) -> None:
        """Hold a layer's recomputation until its gradient arrives and the layer above has finished."""
        for r in ranks:
            gates = ([g[r]] if g else []) + (list(after.get(r, [])) if after else [])
            for n in gates:
                self.graph.add_edge(n, entry[r], EdgeKind.CONTROL)

    # Pipeline endpoints

    def embedding_forward(self, ranks: Sequence[int], p: _Pass, tokens_in: Optional[RankMap]) -> RankMap:
        h, eb, tp = self.h, self.eb, self.par.tp
        T = p.tokens
        self._ctx.update(layer=-1, recompute=False)
        emb = {r: self.compute(r, NodeKind.EMBEDDING, "embedding",
                               PointwiseShape(T * h, eb, 0.0, 1, 1),
                               [tokens_in[r] if tokens_in else None], out_bytes=T * h * eb,
                               ext_in_bytes=0 if tokens_in else T * 4,
                               role=TensorRole.BOUNDARY if tp == 1 else TensorRole.REGULAR)
               for r in ranks}
        return self._tp_reduce("tp_reduce.embedding", ranks, emb, T * h * eb,
                               self._boundary_bytes(p), TensorRole.BOUNDARY)

    def embedding_backward(self, ranks: Sequence[int], p: _Pass, g: Optional[RankMap]) -> None:
        h, eb = self.h, self.eb
        T = p.tokens
        self._ctx.update(layer=-1, phase=PhaseTag.BWD_WT, recompute=False)
        gathered = self._sp_gather("sp_allgather.embedding_grad", ranks, g or {}, T * h * eb)
        for r in ranks:
            self.compute(r, NodeKind.EMBEDDING, "embedding.bwd", PointwiseShape(T * h, eb, 1.0, 2, 1),
                         [gathered.get(r)], ext_in_bytes=0 if g else self._boundary_bytes(p))

    def head_forward(self, ranks: Sequence[int], p: _Pass,
                     x: Optional[RankMap]) -> Tuple[RankMap, Dict[str, Optional[RankMap]]]:
        m, h, eb, tp = self.model, self.h, self.eb, self.par.tp
        T = p.tokens
        t_sp = T // tp if self.sp else T
        rows = p.head_tokens
        vocab_shard = math.ceil(m.vocab_size / tp)
        self._ctx.update(layer=m.num_layers, recompute=False)
        norm = {r: self.compute(r, NodeKind.POINTWISE, "final_norm", PointwiseShape(t_sp * h, eb, 5.0, 1, 1),
                                [x[r] if x else None], out_bytes=t_sp * h * eb,
                                ext_in_bytes=0 if x else t_sp * h * eb)
                for r in ranks}
        gathered = self._sp_gather("sp_allgather.head", ranks, norm, T * h * eb)
        logits = {r: self.compute(r, NodeKind.GEMM, "lm_head", GemmShape(rows, vocab_shard, h),
                                  [gathered[r]], out_bytes=rows * vocab_shard * eb)
                  for r in ranks}
        loss_name = "loss" if m.phase == Phase.TRAIN else "sample"
        loss = {r: self.compute(r, NodeKind.POINTWISE, loss_name, PointwiseShape(rows * vocab_shard, eb, 5.0, 1, 1),
                                [logits[r]], out_bytes=rows * 4)
                for r in ranks}
        return loss, {"x": x, "norm": norm, "gathered": gathered, "logits": logits}

    def head_backward(self, ranks: Sequence[int], p: _Pass, loss: Optional[RankMap],
                      saved: Optional[Dict[str, Optional[RankMap]]]) -> RankMap:
        """Loss, output projection and final norm gradients; `saved` None reads them externally."""
        m, h, eb, tp = self.model, self.h, self.eb, self.par.tp
        T = p.tokens
        t_sp = T // tp if self.sp else T
        vocab_shard = math.ceil(m.vocab_size / tp)
        saved = saved or {}
        logits, gathered, x = saved.get("logits"), saved.get("gathered"), saved.get("x")
        self._ctx.update(layer=m.num_layers, phase=PhaseTag.BWD_ACT, recompute=False)
        loss_b = {}
        for r in ranks:
            inputs = [loss[r] if loss else None, (logits[r], EdgeKind.SAVED) if logits else None]
            loss_b[r] = self.compute(r, NodeKind.POINTWISE, "loss.bwd",
                                     PointwiseShape(T * vocab_shard, eb, 5.0, 1, 1), inputs,
                                     out_bytes=T * vocab_shard * eb,
                                     ext_in_bytes=0 if logits else T * vocab_shard * eb)
        head_d = {}
        for r in ranks:
            head_d[r] = self.compute(r, NodeKind.GEMM, "lm_head.dgrad", GemmShape(T, h, vocab_shard),
                                     [loss_b[r]], out_bytes=T * h * eb)
            self._ctx["phase"] = PhaseTag.BWD_WT
            self.compute(r, NodeKind.GEMM, "lm_head.wgrad", GemmShape(vocab_shard, h, T),
                         [loss_b[r], (gathered[r], EdgeKind.SAVED) if gathered else None],
                         ext_in_bytes=0 if gathered else T * h * eb)
            self._ctx["phase"] = PhaseTag.BWD_ACT
        reduced = self._tp_reduce("tp_reduce.head_grad", ranks, head_d, T * h * eb, t_sp * h * eb)
        return {r: self.compute(r, NodeKind.POINTWISE, "final_norm.bwd", PointwiseShape(t_sp * h, eb, 8.0, 2, 1),
                                [reduced[r], (x[r], EdgeKind.SAVED) if x else None], out_bytes=t_sp * h * eb,
                                ext_in_bytes=0 if x else t_sp * h * eb)
                for r in ranks}

    # Stage passes

    def _set_pass(self, p: _Pass) -> None:
        self.sp = self._sp_base and p.tokens % self.par.tp == 0

    def _boundary_bytes(self, p: _Pass) -> int:
        t_sp = p.tokens // self.par.tp if self.sp else p.tokens
        return t_sp * self.h * self.eb

    def stage_forward(self, d: int, s: int, mb: int, p: _Pass, x: Optional[RankMap],
                      tokens_in: Optional[RankMap] = None) -> Tuple[RankMap, List[Dict[str, Any]]]:
        """All layers of stage `s` for one microbatch; returns the output and per-layer saved maps."""
        ranks = self.layout.stage_ranks(d, s)
        last = s == self.par.pp - 1
        self._set_pass(p)
        self._ctx.update(phase=p.phase, mb=mb, repeat=p.repeat, layer=s * self.layers_per_stage, recompute=False)
        if self.block_seconds is not None:
            shape = BlockShape(self.block_seconds[(p.phase.value, s, p.index)])
            source = tokens_in if s == 0 else x
            out_bytes = self.mb_batch * 4 if last else self._boundary_bytes(p)
            out = {r: self.compute(r, NodeKind.BLOCK, f"stage{s}.{p.phase.value}", shape,
                                   [source[r] if source else None], out_bytes=out_bytes,
                                   role=TensorRole.BOUNDARY)
                   for r in ranks}
            return out, []
        if s == 0:
            x = self.embedding_forward(ranks, p, tokens_in)
        saves: List[Dict[str, Any]] = []
        for i in range(self.layers_per_stage):
            self._ctx["phase"] = p.phase
            x, saved = self.layer_forward(ranks, p, s * self.layers_per_stage + i, x)
            saves.append(saved)
        if last:
            self._ctx["phase"] = p.phase
            x, head_saved = self.head_forward(ranks, p, x)
            saves.append({"head": head_saved})
        return x, saves

    def stage_backward(self, d: int, s: int, mb: int, p: _Pass, g: RankMap,
                       saves: List[Dict[str, Any]]) -> RankMap:
        ranks = self.layout.stage_ranks(d, s)
        last = s == self.par.pp - 1
        self._set_pass(p)
        self._ctx.update(phase=PhaseTag.BWD_ACT, mb=mb, repeat=1,
                         layer=(s + 1) * self.layers_per_stage - 1, recompute=False)
        if self.block_seconds is not None:
            shape = BlockShape(self.block_seconds[("bwd", s, 0)])
            return {r: self.compute(r, NodeKind.BLOCK, f"stage{s}.bwd", shape, [g[r]],
                                    out_bytes=self._boundary_bytes(p) if s > 0 else 0)
                    for r in ranks}
        layer_saves = saves
        if last:
            layer_saves = saves[:-1]
            g = self.head_backward(ranks, p, g, saves[-1]["head"])
        after = None
        for i in reversed(range(self.layers_per_stage)):
            layer = s * self.layers_per_stage + i
            g, after = self.layer_backward(ranks, p, layer, g, layer_saves[i], after)
        if s == 0:
            self.embedding_backward(ranks, p, g)
        return g

    def send_activation(self, d: int, s_from: int, s_to: int, mb: int, p: _Pass, x: RankMap,
                        name: str, phase: PhaseTag, sender_block: BlockKey,
                        nbytes: Optional[int] = None) -> RankMap:
        """P2P transfers between matching (tp, cp) ranks of two stages.

        The transfer closes the sender's block only; the receiver picks it up
        through the data edge into its consuming node.
        """
        out: RankMap = {}
        nbytes = self._boundary_bytes(p) if nbytes is None else nbytes
        if phase == PhaseTag.BWD_ACT:
            layer = s_from * self.layers_per_stage
        else:
            layer = (s_from + 1) * self.layers_per_stage - 1
        self._ctx.update(phase=phase, mb=mb, repeat=p.repeat, recompute=False, layer=layer)
        src_ranks = self.layout.stage_ranks(d, s_from)
        dst_ranks = self.layout.stage_ranks(d, s_to)
        for src, dst in zip(src_ranks, dst_ranks):
            nid = self.p2p(name, src, dst, nbytes, x[src], role=TensorRole.BOUNDARY)
            self._join(src, sender_block, nid)
            out[dst] = nid
        return out

    # Passes

    def train_pass(self) -> _Pass:
        m, par = self.model, self.par
        q = m.seq_len // par.cp
        T = self.mb_batch * q
        return _Pass(PhaseTag.FWD, T, q, m.seq_len, self.mb_batch, T)

    def prefill_pass(self) -> _Pass:
        m, par = self.model, self.par
        q = m.prefill_len // par.cp
        return _Pass(PhaseTag.PREFILL, self.mb_batch * q, q, m.prefill_len, self.mb_batch, self.mb_batch)

    def decode_pass(self, kv_len: int, steps: int = 1, index: int = 0) -> _Pass:
        b = self.mb_batch
        return _Pass(PhaseTag.DECODE, b, 1, kv_len, b, b, decode=True, repeat=steps, index=index)

    def decode_passes(self) -> List[_Pass]:
        m = self.model
        buckets = decode_buckets(m.prefill_len or 0, m.decode_len, self.bucket_ratio, self.exact_decode)
        self.graph.metadata["decode_buckets"] = buckets
        return [self.decode_pass(kv, steps, i) for i, (kv, steps) in enumerate(buckets)]

    # Schedules

    def one_f_one_b(self, s: int) -> List[Tuple[str, int]]:
        """Forward/backward block order of stage `s` under 1F1B."""
        nmb = self.par.num_microbatches
        warmup = min(self.par.pp - s - 1, nmb)
        order = [("F", m) for m in range(warmup)]
        for i in range(nmb - warmup):
            order.append(("F", warmup + i))
            order.append(("B", i))
        order.extend(("B", m) for m in range(nmb - warmup, nmb))
        return order

    def build_training(self) -> OperatorGraph:
        par = self.par
        p = self.train_pass()
        for d in self.replicas:
            for s in range(par.pp):
                blocks = self.one_f_one_b(s)
                for r in self.layout.stage_ranks(d, s):
                    self._schedule[r].extend(blocks)
            acts: Dict[int, RankMap] = {}
            saves: Dict[Tuple[int, int], List[Dict[str, Any]]] = {}
            # emission follows data flow; the 1F1B order comes from _link_schedule
            for mb in range(par.num_microbatches):
                x = None
                self._block = ("F", mb)
                for s in range(par.pp):
                    x, saves[(s, mb)] = self.stage_forward(d, s, mb, p, x)
                    if s < par.pp - 1:
                        x = self.send_activation(d, s, s + 1, mb, p, x, "pp_send.act", p.phase, ("F", mb))
                acts[mb] = x
            for mb in range(par.num_microbatches):
                g = acts[mb]
                self._block = ("B", mb)
                for s in reversed(range(par.pp)):
                    g = self.stage_backward(d, s, mb, p, g, saves[(s, mb)])
                    if s > 0:
                        g = self.send_activation(d, s, s - 1, mb, p, g, "pp_send.grad",
                                                 PhaseTag.BWD_ACT, ("B", mb))
        self._block = None
        self._emit_optimizer()
        return self._finish()

    def _emit_optimizer(self) -> None:
        """Gradient synchronization and the optimizer step, once per data-parallel group."""
        par, m = self.par, self.model
        key = ("O",)
        grad_bytes = 4 if m.precision == Precision.FP32 else 2
        owned = sorted(r for d in self.replicas for s in range(par.pp) for r in self.layout.stage_ranks(d, s))
        owned_set = set(owned)
        for r in owned:
            self._schedule[r].append(key)
        self._block = key
        self._ctx.update(phase=PhaseTag.BWD_WT, layer=m.num_layers + 1, mb=-1, repeat=1, recompute=False)
        seen = set()
        for r in owned:
            # CP ranks hold full weight replicas, so gradients reduce over dp x cp
            group = tuple(x for x in self.layout.group(r, Axis.DP, Axis.CP) if x in owned_set)
            if group in seen:
                continue
            seen.add(group)
            params = m.stage_params(par.tp, par.pp, self.layout.coords(r)[Axis.PP])
            sharded = par.zero_stage != ZeroStage.NONE and len(group) > 1
            if len(group) == 1:
                ready: Dict[int, Optional[int]] = {x: None for x in group}
            elif sharded:
                nid = self.collective(CollectiveKind.REDUCE_SCATTER, "dp_reduce_scatter.grads", group,
                                      params * grad_bytes, {}, "dp", 0)
                ready = {x: nid for x in group}
            else:
                nid = self.collective(CollectiveKind.ALL_REDUCE, "dp_allreduce.grads", group,
                                      params * grad_bytes, {}, "dp", 0)
                ready = {x: nid for x in group}
            elems = math.ceil(params / len(group)) if sharded else params
            step = {x: self.compute(x, NodeKind.POINTWISE, "optimizer.step", PointwiseShape(elems, 4, 10.0, 4, 3),
                                    [ready[x]])
                    for x in group}
            if sharded:
                self.collective(CollectiveKind.ALL_GATHER, "dp_allgather.params", group,
                                params * grad_bytes, step, "dp", 0)
        self._block = None

    def build_inference(self) -> OperatorGraph:
        par = self.par
        prefill = self.prefill_pass()
        decodes = self.decode_passes()
        M = par.num_microbatches
        for d in self.replicas:
            blocks: List[BlockKey] = [("P", mb) for mb in range(M)]
            blocks += [("D", k, mb) for k in range(len(decodes)) for mb in range(M)]
            for s in range(par.pp):
                for r in self.layout.stage_ranks(d, s):
                    self._schedule[r].extend(blocks)
            outputs: Dict[int, Tuple[RankMap, BlockKey]] = {}
            for mb in range(M):
                outputs[mb] = (self._pipeline_pass(d, mb, prefill, ("P", mb), None), ("P", mb))
            for k, p in enumerate(decodes):
                for mb in range(M):
                    key = ("D", k, mb)
                    last, last_key = outputs[mb]
                    if par.pp > 1:
                        # sampled token ids return to the first stage
                        tokens = self.send_activation(d, par.pp - 1, 0, mb, p, last, "pp_send.tokens",
                                                      PhaseTag.DECODE, last_key, nbytes=self.mb_batch * 4)
                    else:
                        tokens = last
                    outputs[mb] = (self._pipeline_pass(d, mb, p, key, tokens), key)
        self._block = None
        return self._finish()

    def _pipeline_pass(self, d: int, mb: int, p: _Pass, key: BlockKey, tokens: Optional[RankMap]) -> RankMap:
        self._block = key
        x = None
        for s in range(self.par.pp):
            x, _ = self.stage_forward(d, s, mb, p, x, tokens_in=tokens if s == 0 else None)
            if s < self.par.pp - 1:
                x = self.send_activation(d, s, s + 1, mb, p, x, "pp_send.act", p.phase, key)
        return x

    def build(self) -> OperatorGraph:
        if self.model.phase == Phase.TRAIN:
            return self.build_training()
        return self.build_inference()

    def _link_schedule(self) -> None:
        """Control edges from the sinks of each block to the sources of the next, per rank."""
        dg = self.graph.digraph
        for r in sorted(self._schedule):
            prev_sinks: List[int] = []
            for key in self._schedule[r]:
                members = self._members.get((r, key), [])
                if not members:
                    continue
                inside = set(members)
                sources = [n for n in members if not any(q in inside for q in dg.predecessors(n))]
                sinks = [n for n in members if not any(q in inside for q in dg.successors(n))]
                for a in prev_sinks:
                    for b in sources:
                        self.graph.add_edge(a, b, EdgeKind.CONTROL)
                prev_sinks = sinks

    def _finish(self) -> OperatorGraph:
        self._link_schedule()
        self.graph.order()
        logger.debug(
            f"[_GraphBuilder] {self.graph.metadata.get('phase')} graph for {self.par.config_id}: "
            f"{len(self.graph)} nodes"
        )
        return self.graph


# Public builders

def _layer_pass(builder: _GraphBuilder, decode: bool, kv_len: Optional[int]) -> _Pass:
    model = builder.model
    if model.phase == Phase.TRAIN:
        return builder.train_pass()
    if decode:
        return builder.decode_pass(kv_len or (model.prefill_len or 0) + 1)
    return builder.prefill_pass()


def build_layer_graph(
    model: ModelSpec,
    par: ParallelismConfig,
    direction: Union[Direction, str] = Direction.FWD,
    *,
    decode: bool = False,
    kv_len: Optional[int] = None,
) -> OperatorGraph:
    """One transformer layer on the ranks of the first (dp, pp) slice.

    Inputs the layer would receive from neighbours (activations, gradients,
    saved tensors) are external, so the graph can be costed on its own.
    """
    direction = Direction(direction)
    builder = _GraphBuilder(model, par, replicas=(0,))
    p = _layer_pass(builder, decode, kv_len)
    builder._set_pass(p)
    ranks = builder.layout.stage_ranks(0, 0)
    phase = p.phase if direction == Direction.FWD else PhaseTag.BWD_ACT
    builder._ctx.update(phase=phase, mb=0, repeat=1, layer=0, recompute=False)
    if direction == Direction.FWD:
        builder.layer_forward(ranks, p, 0, None)
    else:
        builder.layer_backward(ranks, p, 0, None, None)
    builder.graph.metadata.update(direction=direction.value, phase=p.phase.value, kv_len=p.kv_len)
    return builder._finish()


def build_endpoint_graph(
    model: ModelSpec,
    par: ParallelismConfig,
    part: str,
    direction: Union[Direction, str] = Direction.FWD,
    *,
    decode: bool = False,
    kv_len: Optional[int] = None,
) -> OperatorGraph:
    """Embedding (`part="embedding"`) or final norm plus output head (`part="head"`)."""
    direction = Direction(direction)
    if part not in ("embedding", "head"):
        raise ValueError(f"unknown endpoint {part!r}")
    builder = _GraphBuilder(model, par, replicas=(0,))
    p = _layer_pass(builder, decode, kv_len)
    builder._set_pass(p)
    ranks = builder.layout.stage_ranks(0, 0)
    builder._ctx.update(phase=p.phase, mb=0, repeat=1, layer=0, recompute=False)
    if part == "embedding" and direction == Direction.FWD:
        builder.embedding_forward(ranks, p, None)
    elif part == "embedding":
        builder.embedding_backward(ranks, p, None)
    elif direction == Direction.FWD:
        builder.head_forward(ranks, p, None)
    else:
        builder.head_backward(ranks, p, None, None)
    builder.graph.metadata.update(part=part, direction=direction.value, phase=p.phase.value)
    return builder._finish()


def build_full_graph(
    model: ModelSpec,
    par: ParallelismConfig,
    *,
    exact_decode: bool = False,
    decode_bucket_ratio: Optional[float] = None,
    replicas: Optional[Sequence[int]] = None,
) -> OperatorGraph:
    """Every rank, microbatch and layer of one training iteration or inference request."""
    return _GraphBuilder(
        model, par, exact_decode=exact_decode, decode_bucket_ratio=decode_bucket_ratio, replicas=replicas
    ).build()


def build_pipeline_graph(
    model: ModelSpec,
    par: ParallelismConfig,
    block_seconds: Mapping[BlockKey, float],
    *,
    exact_decode: bool = False,
    decode_bucket_ratio: Optional[float] = None,
) -> OperatorGraph:
    """Pipeline schedule whose stage passes are opaque blocks of known duration.

    `block_seconds` is keyed by (phase, stage, pass index), phase one of
    "fwd", "bwd", "prefill", "decode".
    """
    return _GraphBuilder(
        model, par, exact_decode=exact_decode, decode_bucket_ratio=decode_bucket_ratio,
        block_seconds=block_seconds,
    ).build()
