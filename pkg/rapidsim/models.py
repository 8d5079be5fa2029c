"""Result models shared by the orchestrator, the reports and the CLI."""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from rapidsim.schema.specs import ParallelismConfig


class MemoryReport(BaseModel):
    """Per-GPU memory of the worst pipeline stage."""
    params_bytes: int = 0
    grads_bytes: int = 0
    optimizer_bytes: int = 0
    kv_cache_bytes: int = 0
    peak_activation_bytes: Optional[int] = None  # unset until a graph traversal fills it
    overhead_bytes: int = 0
    total_bytes: int = 0
    capacity_bytes: int = 0
    feasible: bool = True
    headroom_bytes: int = 0
    stage: int = 0


class RankBreakdown(BaseModel):
    rank: int
    compute: float
    comm: float
    idle: float


class LinkStats(BaseModel):
    a: int
    b: int
    dim: int
    busy_time: float
    bytes: float
    max_flows: int


class TimelineEntry(BaseModel):
    rank: int
    event_id: int
    name: str
    kind: str
    start: float
    end: float


class FlowRecord(BaseModel):
    src: int
    dst: int
    bytes: float
    start: float
    end: float
    hops: int
    tag: str


class SimResult(BaseModel):
    """Outcome of one network simulation."""
    total_time: float
    ranks: List[RankBreakdown] = Field(default_factory=list)
    links: List[LinkStats] = Field(default_factory=list)
    timeline: Optional[List[TimelineEntry]] = None
    flows: Optional[List[FlowRecord]] = None

    def breakdown(self) -> Dict[str, float]:
        """Mean compute/comm/idle seconds over ranks."""
        if not self.ranks:
            return {"compute": 0.0, "comm": 0.0, "idle": 0.0}
        n = len(self.ranks)
        return {
            "compute": sum(r.compute for r in self.ranks) / n,
            "comm": sum(r.comm for r in self.ranks) / n,
            "idle": sum(r.idle for r in self.ranks) / n,
        }


class RunResult(BaseModel):
    config_id: str
    mode: str
    total_time: float
    sim: SimResult
    memory: MemoryReport
    phases: Dict[str, float] = Field(default_factory=dict)  # e.g. prefill/decode or layer fwd/bwd seconds
    parallelism: Optional[ParallelismConfig] = None


class PrunedCandidate(BaseModel):
    config_id: str
    reason: str
    memory: Optional[MemoryReport] = None
    parallelism: Optional[ParallelismConfig] = None


class SweepReport(BaseModel):
    results: List[RunResult] = Field(default_factory=list)
    pruned: List[PrunedCandidate] = Field(default_factory=list)

    @property
    def candidates(self) -> int:
        return len(self.results) + len(self.pruned)


class FaultSample(BaseModel):
    iteration: int
    faulted_links: List[str]
    derates: List[float]
    total_time: float
    degradation: float


class DegradationSummary(BaseModel):
    """Distribution of faulted / fault-free step time over Monte Carlo iterations."""
    config_id: str
    fault_free_time: float
    iterations: int
    min: float
    p5: float
    p25: float
    median: float
    p75: float
    p95: float
    max: float
    mean: float
    samples: List[FaultSample] = Field(default_factory=list)


class CaseResult(BaseModel):
    case: str
    description: str
    feasible: bool
    total_time: Optional[float] = None
    speedup: Optional[float] = None  # Base time / case time
    memory: Optional[MemoryReport] = None
    reason: Optional[str] = None
