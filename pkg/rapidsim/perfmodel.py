"""Tile-based multi-level roofline latency model for compute operators."""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from rapidsim.config import ATTENTION_BLOCK_SIZES, MAX_TILES_PER_SM, TILE_K_SIZES, TILE_MN_SIZES
from rapidsim.errors import PerfModelConfigError
from rapidsim.graph import (
    AttentionShape,
    BlockShape,
    GemmShape,
    NodeKind,
    OperatorGraph,
    OperatorNode,
    PointwiseShape,
)
from rapidsim.schema.specs import DType, HardwareSpec

logger = logging.getLogger(__name__)

# fp32 accumulator bytes per output element
ACC_BYTES = 4
# backward attention: dQ, dK, dV plus the recomputed scores
ATTENTION_BWD_FLOP_FACTOR = 2.5
SOFTMAX_FLOPS_PER_SCORE = 5.0


@dataclass(frozen=True)
class TilingCandidate:
    tile_m: int
    tile_n: int
    tile_k: int
    tiles_total: int
    tiles_per_sm: int
    waves: int

    def wave_efficiency(self, num_sms: int) -> float:
        return self.tiles_total / (self.waves * num_sms * self.tiles_per_sm)

    @property
    def label(self) -> str:
        return f"{self.tile_m}x{self.tile_n}x{self.tile_k}/{self.tiles_per_sm}"


@dataclass(frozen=True)
class TrafficProfile:
    flops: float
    sram_bytes: float
    l2_bytes: float
    hbm_bytes: float
    l2_miss_rate: float


@dataclass(frozen=True)
class OpCost:
    """Latency of one node (already multiplied by its repeat count) and how it was derived."""
    seconds: float
    flops: float = 0.0
    traffic: Optional[TrafficProfile] = None
    tile: str = ""
    bound: str = ""


# GEMM tiling

def _useful_tiles(sizes, dim: int) -> List[int]:
    """Drop tile sizes at least twice the dimension; the smallest always survives."""
    kept = [t for t in sizes if t == sizes[0] or t // 2 < dim]
    return kept


def _waves(tiles: int, num_sms: int, tiles_per_sm: int) -> int:
    return math.ceil(tiles / (num_sms * tiles_per_sm))


def enumerate_tilings(shape: GemmShape, hw: HardwareSpec, dtype: DType) -> List[TilingCandidate]:
    """Tile shapes that fit in one SM's SRAM, each with every feasible occupancy."""
    eb = dtype.bytes
    m, n, k = max(1, shape.m), max(1, shape.n), max(1, shape.k)
    candidates = []
    for tm in _useful_tiles(TILE_MN_SIZES, m):
        for tn in _useful_tiles(TILE_MN_SIZES, n):
            for tk in _useful_tiles(TILE_K_SIZES, k):
                footprint = (tm * tk + tk * tn) * eb + tm * tn * ACC_BYTES
                if footprint > hw.sram_per_sm:
                    continue
                tiles = shape.batch * math.ceil(m / tm) * math.ceil(n / tn)
                max_tps = min(hw.sram_per_sm // footprint, math.ceil(tiles / hw.num_sms), MAX_TILES_PER_SM)
                for tps in range(1, max(1, max_tps) + 1):
                    candidates.append(TilingCandidate(tm, tn, tk, tiles, tps, _waves(tiles, hw.num_sms, tps)))
    if not candidates:
        tm = tn = TILE_MN_SIZES[0]
        tk = TILE_K_SIZES[0]
        tiles = shape.batch * math.ceil(m / tm) * math.ceil(n / tn)
        candidates.append(TilingCandidate(tm, tn, tk, tiles, 1, _waves(tiles, hw.num_sms, 1)))
    return candidates


def _working_set(cand: TilingCandidate, shape: GemmShape, eb: int, hw: HardwareSpec) -> float:
    """Operand bytes touched by all co-resident tiles at once."""
    m, n, k = shape.m, shape.n, shape.k
    gm, gn = math.ceil(m / cand.tile_m), math.ceil(n / cand.tile_n)
    resident = min(cand.tiles_total, hw.num_sms * cand.tiles_per_sm)
    per_matrix = gm * gn
    if resident >= per_matrix:
        matrices = min(math.ceil(resident / per_matrix), shape.batch)
        return matrices * (m * k + k * n) * eb
    side = math.ceil(math.sqrt(resident))
    best = math.inf
    # square-ish block of output tiles, tried in both orientations
    for rows_first in (True, False):
        if rows_first:
            rows = min(gm, side)
            cols = min(gn, math.ceil(resident / rows))
        else:
            cols = min(gn, side)
            rows = min(gm, math.ceil(resident / cols))
        ws = (min(rows * cand.tile_m, m) * k + min(cols * cand.tile_n, n) * k) * eb
        best = min(best, ws)
    return best


def tile_traffic(cand: TilingCandidate, shape: GemmShape, dtype: DType, hw: HardwareSpec) -> TrafficProfile:
    """SRAM, L2 and HBM bytes for one tiling."""
    eb = dtype.bytes
    m, n, k, b = shape.m, shape.n, shape.k, shape.batch
    gm, gn = math.ceil(m / cand.tile_m), math.ceil(n / cand.tile_n)
    streamed = (m * k * gn + k * n * gm) * eb * b
    l2 = streamed + m * n * eb * b
    sram = l2 + streamed
    compulsory = b * (m * k + k * n + m * n) * eb
    ws = _working_set(cand, shape, eb, hw)
    overflow = max(0.0, (ws - hw.l2_capacity) / ws) if ws > 0 else 0.0
    hbm = compulsory + overflow * (l2 - compulsory)
    return TrafficProfile(
        flops=float(shape.flops),
        sram_bytes=float(sram),
        l2_bytes=float(l2),
        hbm_bytes=float(hbm),
        l2_miss_rate=hbm / l2 if l2 else 0.0,
    )


# Roofline

def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not value or value <= 0:
            raise PerfModelConfigError(f"{name} must be positive, got {value!r}")


def roofline_limbs(traffic: TrafficProfile, cand: Optional[TilingCandidate], hw: HardwareSpec,
                   dtype: DType) -> Dict[str, float]:
    """Time each resource would need on its own."""
    peak = hw.peak(dtype)
    _require_positive(peak_flops=peak, sram_bw=hw.sram_bw, l2_bw=hw.l2_bw, hbm_bw=hw.hbm_bw)
    efficiency = cand.wave_efficiency(hw.num_sms) if cand is not None else 1.0
    return {
        "compute": traffic.flops / (peak * hw.compute_derate * efficiency),
        "sram": traffic.sram_bytes / hw.sram_bw,
        "l2": traffic.l2_bytes / hw.l2_bw,
        "hbm": traffic.hbm_bytes / (hw.hbm_bw * hw.mem_derate),
    }


def roofline_time(traffic: TrafficProfile, cand: Optional[TilingCandidate], hw: HardwareSpec, dtype: DType) -> float:
    return max(roofline_limbs(traffic, cand, hw, dtype).values())


def _bound(limbs: Dict[str, float]) -> str:
    return max(limbs, key=lambda name: (limbs[name], name))


def gemm_latency(shape: GemmShape, hw: HardwareSpec, dtype: DType) -> Tuple[float, TilingCandidate]:
    """Fastest tiling; ties go to fewer HBM bytes, then larger tiles, then lower occupancy."""
    best_key = None
    best = None
    for cand in enumerate_tilings(shape, hw, dtype):
        traffic = tile_traffic(cand, shape, dtype, hw)
        t = roofline_time(traffic, cand, hw, dtype)
        key = (t, traffic.hbm_bytes, -cand.tile_m, -cand.tile_n, -cand.tile_k, cand.tiles_per_sm)
        if best_key is None or key < best_key:
            best_key, best = key, cand
    return best_key[0], best


def gemm_cost(shape: GemmShape, hw: HardwareSpec, dtype: DType) -> OpCost:
    seconds, cand = gemm_latency(shape, hw, dtype)
    traffic = tile_traffic(cand, shape, dtype, hw)
    return OpCost(seconds, traffic.flops, traffic, cand.label, _bound(roofline_limbs(traffic, cand, hw, dtype)))


# Pointwise

def pointwise_traffic(elems: int, bytes_per_elem: int, flops_per_elem: float, reads: int, writes: int) -> TrafficProfile:
    moved = float(elems * bytes_per_elem * (reads + writes))
    return TrafficProfile(float(elems * flops_per_elem), moved, moved, moved, 1.0 if moved else 0.0)


def pointwise_latency(elems: int, bytes_per_elem: int, flops_per_elem: float, reads: int, writes: int,
                      hw: HardwareSpec) -> float:
    """Bandwidth/compute bound for an elementwise kernel streaming through HBM."""
    if elems <= 0:
        return 0.0
    vector = hw.vector_peak()
    _require_positive(vector_flops=vector, hbm_bw=hw.hbm_bw)
    compute = elems * flops_per_elem / (vector * hw.compute_derate)
    memory = elems * bytes_per_elem * (reads + writes) / (hw.hbm_bw * hw.mem_derate)
    return max(compute, memory)


def pointwise_cost(shape: PointwiseShape, hw: HardwareSpec) -> OpCost:
    seconds = pointwise_latency(shape.elems, shape.bytes_per_elem, shape.flops_per_elem,
                                shape.reads, shape.writes, hw)
    traffic = pointwise_traffic(shape.elems, shape.bytes_per_elem, shape.flops_per_elem, shape.reads, shape.writes)
    compute = traffic.flops / (hw.vector_peak() * hw.compute_derate)
    bound = "compute" if seconds and compute >= seconds else "hbm"
    return OpCost(seconds, traffic.flops, traffic, "", bound)


# Attention

def _attention_flops(shape: AttentionShape) -> Tuple[float, float]:
    """(matmul flops, softmax flops) for QK^T, softmax and PV."""
    bh = shape.batch * shape.heads
    scores = bh * shape.q_len * shape.kv_len
    matmul = 4.0 * scores * shape.head_dim
    softmax = SOFTMAX_FLOPS_PER_SCORE * scores
    if shape.backward:
        return matmul * ATTENTION_BWD_FLOP_FACTOR, softmax * 2.0
    return matmul, softmax


def fused_attention(shape: AttentionShape, hw: HardwareSpec, dtype: DType) -> Optional[Tuple[float, TrafficProfile, str, str]]:
    """Best blocked attention kernel, or None when no block pair fits in SRAM."""
    eb = dtype.bytes
    d, q, kv = shape.head_dim, shape.q_len, shape.kv_len
    bh = shape.batch * shape.heads
    passes = 2 if shape.backward else 1
    matmul, softmax = _attention_flops(shape)
    peak, vector = hw.peak(dtype), hw.vector_peak()
    _require_positive(peak_flops=peak, vector_flops=vector, sram_bw=hw.sram_bw, l2_bw=hw.l2_bw, hbm_bw=hw.hbm_bw)

    if shape.backward:
        hbm = (4 * q + 4 * kv) * d * bh * eb
    else:
        hbm = (2 * q + 2 * kv) * d * bh * eb

    best = None
    for br in ATTENTION_BLOCK_SIZES:
        for bc in ATTENTION_BLOCK_SIZES:
            footprint = br * d * eb + 2 * bc * d * eb + br * d * ACC_BYTES + br * bc * ACC_BYTES
            if footprint > hw.sram_per_sm:
                continue
            q_blocks = math.ceil(q / br)
            tiles = bh * q_blocks
            tps = max(1, min(hw.sram_per_sm // footprint, MAX_TILES_PER_SM, math.ceil(tiles / hw.num_sms)))
            waves = _waves(tiles, hw.num_sms, tps)
            efficiency = tiles / (waves * hw.num_sms * tps)
            l2 = passes * bh * (2 * q * d + q_blocks * 2 * kv * d) * eb
            score_tiles = bh * q_blocks * math.ceil(kv / bc) * br * bc * ACC_BYTES * 2
            sram = l2 + passes * score_tiles
            traffic = TrafficProfile(matmul + softmax, float(sram), float(l2), float(hbm), hbm / l2)
            limbs = {
                "compute": matmul / (peak * hw.compute_derate * efficiency) + softmax / (vector * hw.compute_derate),
                "sram": sram / hw.sram_bw,
                "l2": l2 / hw.l2_bw,
                "hbm": hbm / (hw.hbm_bw * hw.mem_derate),
            }
            t = max(limbs.values())
            key = (t, -br, -bc, tps)
            if best is None or key < best[0]:
                best = (key, traffic, f"{br}x{bc}/{tps}", _bound(limbs))
    if best is None:
        return None
    return best[0][0], best[1], best[2], best[3]


def naive_attention(shape: AttentionShape, hw: HardwareSpec, dtype: DType) -> Tuple[float, TrafficProfile]:
    """Unfused path: two batched GEMMs with the score matrix materialized in HBM."""
    eb = dtype.bytes
    bh = shape.batch * shape.heads
    scores_gemm = GemmShape(shape.q_len, shape.kv_len, shape.head_dim, batch=bh)
    values_gemm = GemmShape(shape.q_len, shape.head_dim, shape.kv_len, batch=bh)
    score_elems = bh * shape.q_len * shape.kv_len
    s_cost = gemm_cost(scores_gemm, hw, dtype)
    v_cost = gemm_cost(values_gemm, hw, dtype)
    softmax_seconds = pointwise_latency(score_elems, eb, SOFTMAX_FLOPS_PER_SCORE, 1, 1, hw)
    softmax_traffic = pointwise_traffic(score_elems, eb, SOFTMAX_FLOPS_PER_SCORE, 1, 1)
    parts = [s_cost.traffic, v_cost.traffic, softmax_traffic]
    factor = ATTENTION_BWD_FLOP_FACTOR if shape.backward else 1.0
    seconds = (s_cost.seconds + v_cost.seconds + softmax_seconds) * factor
    l2 = sum(p.l2_bytes for p in parts) * factor
    hbm = sum(p.hbm_bytes for p in parts) * factor
    traffic = TrafficProfile(
        flops=sum(p.flops for p in parts) * factor,
        sram_bytes=sum(p.sram_bytes for p in parts) * factor,
        l2_bytes=l2,
        hbm_bytes=hbm,
        l2_miss_rate=hbm / l2 if l2 else 0.0,
    )
    return seconds, traffic


def attention_cost(shape: AttentionShape, hw: HardwareSpec, dtype: DType) -> OpCost:
    fused = fused_attention(shape, hw, dtype)
    if fused is None:
        logger.debug(f"[attention_cost] head_dim={shape.head_dim} does not fit in SRAM, using the unfused path")
        seconds, traffic = naive_attention(shape, hw, dtype)
        return OpCost(seconds, traffic.flops, traffic, "unfused", "")
    seconds, traffic, tile, bound = fused
    return OpCost(seconds, traffic.flops, traffic, tile, bound)


def flash_attention_latency(shape: AttentionShape, hw: HardwareSpec, dtype: DType) -> float:
    return attention_cost(shape, hw, dtype).seconds


# Graph costing

def _shape_cost(node: OperatorNode, hw: HardwareSpec, dtype: DType) -> OpCost:
    shape = node.shape
    if isinstance(shape, GemmShape):
        return gemm_cost(shape, hw, dtype)
    if isinstance(shape, AttentionShape):
        return attention_cost(shape, hw, dtype)
    if isinstance(shape, PointwiseShape):
        return pointwise_cost(shape, hw)
    if isinstance(shape, BlockShape):
        return OpCost(shape.seconds, bound="block")
    raise PerfModelConfigError(f"node {node.id} ({node.name}) has no costable shape")


def _repeated(base: OpCost, repeat: int) -> OpCost:
    if repeat == 1:
        return base
    return replace(base, seconds=base.seconds * repeat, flops=base.flops * repeat)


def cost_graph(graph: OperatorGraph, hw: HardwareSpec, dtype: DType) -> Dict[int, OpCost]:
    """Latency of every compute node; communication nodes are left to the network."""
    cache: Dict[Tuple[NodeKind, object], OpCost] = {}
    costs: Dict[int, OpCost] = {}
    for node in graph.nodes:
        if not node.is_compute:
            continue
        key = (node.kind, node.shape)
        if key not in cache:
            cache[key] = _shape_cost(node, hw, dtype)
        costs[node.id] = _repeated(cache[key], node.repeat)
    logger.debug(f"[cost_graph] costed {len(costs)} nodes with {len(cache)} distinct shapes")
    return costs
