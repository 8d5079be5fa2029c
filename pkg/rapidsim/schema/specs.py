"""Input document schemas and typed specifications."""
import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

from rapidsim.config import FAULT_DERATE_CLAMP


class InvariantError(ValueError):
    """Raised inside validators; carries the name of the violated invariant."""

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        self.message = message
        super().__init__(f"invariant '{invariant}': {message}")


class StrictModel(BaseModel):
    """Unknown fields are rejected and parsed specs are immutable."""
    model_config = ConfigDict(extra="forbid", frozen=True)


# Enumerations

class Phase(str, Enum):
    TRAIN = "train"
    INFERENCE = "inference"


class Precision(str, Enum):
    FP32 = "fp32"
    MIXED_FP16 = "mixed_fp16"
    MIXED_BF16 = "mixed_bf16"


class DType(str, Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    BF16 = "bf16"

    @property
    def bytes(self) -> int:
        return 4 if self is DType.FP32 else 2


class BaseTopology(str, Enum):
    RING = "Ring"
    FULLY_CONNECTED = "FullyConnected"
    SWITCH = "Switch"
    MESH1D = "Mesh1D"


class Axis(str, Enum):
    """Parallelism axes that own a rank stride. SP rides on TP groups."""
    TP = "tp"
    CP = "cp"
    DP = "dp"
    PP = "pp"


class ZeroStage(str, Enum):
    NONE = "none"
    Z1 = "z1"
    Z2 = "z2"
    Z3 = "z3"

    @property
    def level(self) -> int:
        return ["none", "z1", "z2", "z3"].index(self.value)


class Recompute(str, Enum):
    NONE = "none"
    SELECTIVE = "selective"
    FULL = "full"


class FaultKind(str, Enum):
    SOFT = "soft"
    HARD = "hard"


class ExecutionMode(str, Enum):
    FLATTENED = "flattened"
    HIERARCHICAL = "hierarchical"


# Model

class ModelSpec(StrictModel):
    name: str = "model"
    num_layers: int = Field(ge=1)
    hidden_dim: int = Field(ge=1)
    num_heads: int = Field(ge=1)
    head_dim: int = Field(ge=1)  # derived from hidden_dim / num_heads when omitted
    ffn_dim: int = Field(ge=1)
    vocab_size: int = Field(ge=1)
    seq_len: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    phase: Phase = Phase.TRAIN
    prefill_len: Optional[int] = Field(default=None, ge=1)
    decode_len: int = Field(default=0, ge=0)
    precision: Precision = Precision.MIXED_BF16
    gated_ffn: bool = False
    tied_embeddings: bool = False

    @model_validator(mode="before")
    @classmethod
    def _derive_head_dim(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("head_dim") is None:
            hidden, heads = data.get("hidden_dim"), data.get("num_heads")
            if isinstance(hidden, int) and isinstance(heads, int) and heads > 0:
                if hidden % heads:
                    raise InvariantError(
                        "head divisibility",
                        f"hidden_dim {hidden} is not divisible by num_heads {heads}",
                    )
                data = {**data, "head_dim": hidden // heads}
        return data

    @model_validator(mode="after")
    def _check(self) -> "ModelSpec":
        if self.hidden_dim % self.num_heads:
            raise InvariantError(
                "head divisibility",
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}",
            )
        if self.head_dim * self.num_heads != self.hidden_dim:
            raise InvariantError(
                "head_dim",
                f"stated head_dim {self.head_dim} != hidden_dim / num_heads = "
                f"{self.hidden_dim // self.num_heads}",
            )
        if self.phase == Phase.INFERENCE and self.prefill_len is None:
            raise InvariantError("inference lengths", "inference requires prefill_len >= 1")
        return self

    @property
    def dtype(self) -> DType:
        return {
            Precision.FP32: DType.FP32,
            Precision.MIXED_FP16: DType.FP16,
            Precision.MIXED_BF16: DType.BF16,
        }[self.precision]

    @property
    def bytes_per_elem(self) -> int:
        return self.dtype.bytes

    @property
    def context_tokens(self) -> int:
        """Tokens held in the KV cache at the end of an inference request."""
        return (self.prefill_len or 0) + self.decode_len

    def layer_weight_params(self) -> int:
        """Weights of one layer that are sharded by tensor parallelism."""
        h, f = self.hidden_dim, self.ffn_dim
        mlp = (3 if self.gated_ffn else 2) * h * f
        return 4 * h * h + mlp

    def layer_params(self) -> int:
        return self.layer_weight_params() + 2 * self.hidden_dim

    def total_params(self) -> int:
        embed = self.vocab_size * self.hidden_dim
        head = 0 if self.tied_embeddings else embed
        return self.num_layers * self.layer_params() + embed + head + self.hidden_dim

    def stage_params(self, tp: int, pp: int, stage: int) -> int:
        """Parameters held by one rank of pipeline stage `stage`."""
        h = self.hidden_dim
        vocab_shard = math.ceil(self.vocab_size / tp)
        layers = self.num_layers // pp
        count = layers * (self.layer_weight_params() // tp + 2 * h)
        if stage == 0:
            count += vocab_shard * h
        if stage == pp - 1:
            count += h
            if not (self.tied_embeddings and pp == 1):
                count += vocab_shard * h
        return count


# Hardware

class HardwareSpec(StrictModel):
    name: str = "gpu"
    peak_flops: Dict[DType, PositiveFloat] = Field(min_length=1)
    vector_flops: Optional[PositiveFloat] = None
    num_sms: int = Field(ge=1)
    sram_per_sm: int = Field(ge=1)
    sram_bw: PositiveFloat
    l2_capacity: int = Field(ge=1)
    l2_bw: PositiveFloat
    hbm_capacity: int = Field(ge=1)
    hbm_bw: PositiveFloat
    compute_derate: float = Field(default=1.0, gt=0.0, le=1.0)
    mem_derate: float = Field(default=1.0, gt=0.0, le=1.0)
    overlap_factor: float = Field(default=0.0, ge=0.0, le=1.0)
    memory_overhead: float = Field(default=1.0, ge=1.0)

    @model_validator(mode="after")
    def _check(self) -> "HardwareSpec":
        if not (self.sram_bw > self.l2_bw > self.hbm_bw):
            raise InvariantError(
                "bandwidth ordering",
                f"need sram_bw > l2_bw > hbm_bw, got {self.sram_bw:g} / {self.l2_bw:g} / {self.hbm_bw:g}",
            )
        sram_total = self.num_sms * self.sram_per_sm
        if not (sram_total < self.l2_capacity < self.hbm_capacity):
            raise InvariantError(
                "capacity ordering",
                f"need num_sms*sram_per_sm < l2_capacity < hbm_capacity, "
                f"got {sram_total} / {self.l2_capacity} / {self.hbm_capacity}",
            )
        return self

    def peak(self, dtype: DType) -> float:
        """Tensor throughput for `dtype`; fp32 falls back to half the 16-bit peak."""
        table = self.peak_flops
        if dtype in table:
            return table[dtype]
        if dtype == DType.FP32:
            half = table.get(DType.FP16) or table.get(DType.BF16)
            return half / 2.0
        other = DType.BF16 if dtype == DType.FP16 else DType.FP16
        if other in table:
            return table[other]
        return table[DType.FP32] * 2.0

    def vector_peak(self) -> float:
        return self.vector_flops if self.vector_flops is not None else self.peak(DType.FP32)


# Topology

class DimensionSpec(StrictModel):
    base: BaseTopology
    node_count: int = Field(ge=2)
    link_bw: PositiveFloat
    link_latency: float = Field(default=0.0, ge=0.0)


class TopologySpec(StrictModel):
    dims: Tuple[DimensionSpec, ...] = Field(min_length=1)
    # KingMesh2D: the two Mesh1D dimensions that also get diagonal links
    diagonal_dims: Optional[Tuple[int, int]] = None
    name: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "TopologySpec":
        if self.diagonal_dims is not None:
            a, b = self.diagonal_dims
            if a == b or not (0 <= a < len(self.dims)) or not (0 <= b < len(self.dims)):
                raise InvariantError("diagonal dims", f"invalid dimension pair {self.diagonal_dims}")
            for d in (a, b):
                if self.dims[d].base != BaseTopology.MESH1D:
                    raise InvariantError("diagonal dims", f"dimension {d} must be Mesh1D")
        return self

    @property
    def num_ranks(self) -> int:
        return math.prod(d.node_count for d in self.dims)


# Parallelism

class ParallelismConfig(StrictModel):
    dp: int = Field(default=1, ge=1)
    tp: int = Field(default=1, ge=1)
    pp: int = Field(default=1, ge=1)
    cp: int = Field(default=1, ge=1)
    sp_enabled: bool = False
    num_microbatches: int = Field(default=1, ge=1)
    zero_stage: ZeroStage = ZeroStage.NONE
    recompute: Recompute = Recompute.NONE
    # innermost (fastest varying rank stride) first
    axis_order: Tuple[Axis, ...] = (Axis.TP, Axis.CP, Axis.DP, Axis.PP)

    @model_validator(mode="after")
    def _check(self) -> "ParallelismConfig":
        if sorted(a.value for a in self.axis_order) != sorted(a.value for a in Axis):
            raise InvariantError(
                "axis order", f"axis_order must list each of tp, cp, dp, pp once, got {list(self.axis_order)}"
            )
        return self

    @property
    def world_size(self) -> int:
        return self.dp * self.tp * self.pp * self.cp

    def degree(self, axis: Axis) -> int:
        return getattr(self, axis.value)

    @property
    def config_id(self) -> str:
        parts = [
            f"dp{self.dp}", f"tp{self.tp}", f"pp{self.pp}", f"cp{self.cp}",
            f"mb{self.num_microbatches}", self.zero_stage.value, self.recompute.value,
        ]
        if self.sp_enabled:
            parts.append("sp")
        return "-".join(parts)


# Faults

class LinkFault(StrictModel):
    endpoint_a: int = Field(ge=0)
    endpoint_b: int = Field(ge=0)
    kind: FaultKind = FaultKind.SOFT
    derate: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    latency_factor: float = Field(default=1.0, ge=1.0)

    @model_validator(mode="after")
    def _check(self) -> "LinkFault":
        if self.endpoint_a == self.endpoint_b:
            raise InvariantError("fault endpoints", "a link fault needs two distinct endpoints")
        if self.kind == FaultKind.SOFT and self.derate is None:
            raise InvariantError("soft derate", "soft faults need a derate in (0, 1)")
        if self.kind == FaultKind.HARD and self.derate is not None:
            raise InvariantError("hard derate", "hard faults carry no derate")
        return self


class FaultGenerator(StrictModel):
    count: int = Field(default=1, ge=1)
    kind: FaultKind = FaultKind.SOFT
    derate_mean: float = Field(default=0.5, gt=0.0, le=1.0)
    derate_std: float = Field(default=0.1, ge=0.0)
    derate_clamp: Tuple[float, float] = FAULT_DERATE_CLAMP
    rng_seed: int = 0
    dims: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def _check(self) -> "FaultGenerator":
        lo, hi = self.derate_clamp
        if not (0.0 < lo <= hi <= 1.0):
            raise InvariantError("derate clamp", f"need 0 < low <= high <= 1, got {self.derate_clamp}")
        return self


class FaultSpec(StrictModel):
    faults: Tuple[LinkFault, ...] = ()
    generator: Optional[FaultGenerator] = None


# Run document

class TopologyDoc(StrictModel):
    """Either a named preset with node counts or an explicit dimension stack."""
    preset: Optional[str] = None
    node_counts: Optional[List[int]] = None
    link_bw: Optional[Union[PositiveFloat, List[PositiveFloat]]] = None
    link_latency: Union[float, List[float]] = 0.0
    dims: Optional[List[DimensionSpec]] = None
    diagonal_dims: Optional[Tuple[int, int]] = None
    name: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "TopologyDoc":
        if (self.preset is None) == (self.dims is None):
            raise InvariantError("topology form", "give exactly one of 'preset' or 'dims'")
        if self.preset is not None and (self.node_counts is None or self.link_bw is None):
            raise InvariantError("topology form", "a preset needs node_counts and link_bw")
        return self


class RunSettings(StrictModel):
    mode: ExecutionMode = ExecutionMode.FLATTENED
    exact_decode: bool = False
    decode_bucket_ratio: Optional[float] = Field(default=None, gt=1.0)
    rng_seed: int = 0


class SweepGrid(StrictModel):
    tp: Optional[List[int]] = None
    pp: Optional[List[int]] = None
    cp: Optional[List[int]] = None
    microbatches: Optional[List[int]] = None
    zero_stages: Optional[List[ZeroStage]] = None
    recompute: Optional[List[Recompute]] = None
    sp: Optional[List[bool]] = None


class MonteCarloSettings(StrictModel):
    iterations: int = Field(default=100, ge=1)
    generator: FaultGenerator = FaultGenerator()


class WhatIfSettings(StrictModel):
    throttle: float = Field(default=0.73, gt=0.0, le=1.0)
    cases: Optional[List[str]] = None


class RunDoc(StrictModel):
    topology: TopologyDoc
    parallelism: ParallelismConfig = ParallelismConfig()
    faults: FaultSpec = FaultSpec()
    settings: RunSettings = RunSettings()
    sweep: Optional[SweepGrid] = None
    monte_carlo: Optional[MonteCarloSettings] = None
    whatif: Optional[WhatIfSettings] = None
