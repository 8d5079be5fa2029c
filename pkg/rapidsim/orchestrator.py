"""End-to-end runs in flattened or hierarchical mode, sweeps, fault Monte Carlo and hardware what-ifs."""
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from rapidsim.config import get_decode_bucket_ratio
from rapidsim.errors import (
    HierarchicalConstraintError,
    InfeasibleConfigError,
    SpecParseError,
    SpecValidationError,
)
from rapidsim.graph import (
    Direction,
    OperatorGraph,
    build_endpoint_graph,
    build_full_graph,
    build_layer_graph,
    build_pipeline_graph,
    check_sharding,
    decode_buckets,
)
from rapidsim.memmodel import is_feasible
from rapidsim.models import (
    CaseResult,
    DegradationSummary,
    FaultSample,
    MemoryReport,
    PrunedCandidate,
    RunResult,
    SimResult,
    SweepReport,
)
from rapidsim.netsim import simulate
from rapidsim.perfmodel import OpCost, cost_graph
from rapidsim.schema.specs import (
    Axis,
    ExecutionMode,
    FaultGenerator,
    FaultSpec,
    HardwareSpec,
    ModelSpec,
    MonteCarloSettings,
    ParallelismConfig,
    Phase,
    RunSettings,
    SweepGrid,
    TopologySpec,
    WhatIfSettings,
)
from rapidsim.specs import SpecBundle, check_parallelism
from rapidsim.topology import Network, apply_faults, build_network, fault_summary
from rapidsim.trace import RankTrace, linearize

logger = logging.getLogger(__name__)


# Networks

def prepare_network(topology: TopologySpec, faults: FaultSpec, rng: Optional[np.random.Generator] = None) -> Network:
    """Build the link-level network and apply the run's faults."""
    net = build_network(topology)
    if faults.faults or faults.generator is not None:
        net = apply_faults(net, faults, rng)
    return net


# Hierarchical mapping

def check_hierarchical(par: ParallelismConfig, topology: TopologySpec) -> None:
    """TP and CP must sit innermost and fit inside the first network dimension."""
    inner = {Axis.TP, Axis.CP}
    seen_outer = None
    for axis in par.axis_order:
        if par.degree(axis) == 1:
            continue
        if axis in inner and seen_outer is not None:
            raise HierarchicalConstraintError(
                f"{axis.value} must be ordered before {seen_outer.value} in axis_order"
            )
        if axis not in inner:
            seen_outer = axis
    width = par.tp * par.cp
    first = topology.dims[0].node_count
    if first % width:
        raise HierarchicalConstraintError(
            f"tp*cp = {width} must divide the {first} GPUs of the first network dimension"
        )


# Workloads

@dataclass
class _SubGraph:
    """A layer or endpoint graph lowered once and simulated per network."""
    name: str
    traces: List[RankTrace]
    graph: Optional[OperatorGraph] = None
    costs: Optional[Dict[int, OpCost]] = None


@dataclass
class Workload:
    """Everything about a run that does not depend on the network."""
    model: ModelSpec
    hardware: HardwareSpec
    parallelism: ParallelismConfig
    settings: RunSettings
    mode: ExecutionMode
    memory: MemoryReport
    traces: List[RankTrace] = field(default_factory=list)
    graph: Optional[OperatorGraph] = None
    costs: Optional[Dict[int, OpCost]] = None
    parts: Dict[Tuple[str, str, int], _SubGraph] = field(default_factory=dict)

    @property
    def config_id(self) -> str:
        return self.parallelism.config_id

    def simulate(self, net: Network, *, timeline: bool = False, record_flows: bool = False
                 ) -> Tuple[SimResult, Dict[str, float]]:
        if self.mode == ExecutionMode.FLATTENED:
            result = simulate(self.traces, net, overlap_factor=self.hardware.overlap_factor,
                              timeline=timeline, record_flows=record_flows)
            return result, _phase_compute(self.traces)
        return self._simulate_hierarchical(net, timeline, record_flows)

    def part_seconds(self, net: Network) -> Dict[Tuple[str, str, int], float]:
        seconds = {}
        for key, part in self.parts.items():
            seconds[key] = simulate(part.traces, net, overlap_factor=self.hardware.overlap_factor).total_time
        return seconds

    def block_seconds(self, seconds: Mapping[Tuple[str, str, int], float]) -> Dict[Tuple[str, int, int], float]:
        """Stage-block durations: layers per stage times one layer, plus the endpoints on end stages."""
        pp = self.parallelism.pp
        lps = self.model.num_layers // pp
        blocks: Dict[Tuple[str, int, int], float] = {}
        for (part, phase, index), layer_time in seconds.items():
            if part != "layer":
                continue
            for s in range(pp):
                total = lps * layer_time
                if s == 0:
                    total += seconds.get(("embedding", phase, index), 0.0)
                if s == pp - 1:
                    total += seconds.get(("head", phase, index), 0.0)
                blocks[(phase, s, index)] = total
        return blocks

    def _simulate_hierarchical(self, net: Network, timeline: bool, record_flows: bool
                               ) -> Tuple[SimResult, Dict[str, float]]:
        seconds = self.part_seconds(net)
        blocks = self.block_seconds(seconds)
        pipeline = build_pipeline_graph(
            self.model, self.parallelism, blocks,
            exact_decode=self.settings.exact_decode, decode_bucket_ratio=self.settings.decode_bucket_ratio,
        )
        costs = cost_graph(pipeline, self.hardware, self.model.dtype)
        self.graph, self.costs = pipeline, costs
        self.traces = linearize(pipeline, costs)
        result = simulate(self.traces, net, overlap_factor=self.hardware.overlap_factor,
                          timeline=timeline, record_flows=record_flows)
        phases = {f"{part}_{phase}" + (f"_{index}" if index else ""): t
                  for (part, phase, index), t in sorted(seconds.items())}
        return result, phases


def _phase_compute(traces: Sequence[RankTrace]) -> Dict[str, float]:
    """Mean compute seconds per phase over ranks."""
    if not traces:
        return {}
    totals: Dict[str, float] = defaultdict(float)
    for trace in traces:
        for event in trace.events:
            totals[event.phase] += event.duration
    return {phase: t / len(traces) for phase, t in sorted(totals.items())}


def _lower(graph: OperatorGraph, hw: HardwareSpec, model: ModelSpec, keep: bool, name: str) -> _SubGraph:
    costs = cost_graph(graph, hw, model.dtype)
    traces = linearize(graph, costs)
    return _SubGraph(name, traces, graph if keep else None, costs if keep else None)


def _hierarchical_parts(model: ModelSpec, par: ParallelismConfig, hw: HardwareSpec, settings: RunSettings,
                        keep: bool) -> Dict[Tuple[str, str, int], _SubGraph]:
    # (phase key, pass index, decode, kv_len)
    passes: List[Tuple[str, int, bool, Optional[int]]] = []
    if model.phase == Phase.TRAIN:
        passes.append(("fwd", 0, False, None))
    else:
        passes.append(("prefill", 0, False, None))
        ratio = settings.decode_bucket_ratio or get_decode_bucket_ratio()
        buckets = decode_buckets(model.prefill_len or 0, model.decode_len, ratio, settings.exact_decode)
        passes += [("decode", k, True, kv) for k, (kv, _steps) in enumerate(buckets)]

    parts: Dict[Tuple[str, str, int], _SubGraph] = {}
    for phase, index, decode, kv in passes:
        directions = [(phase, Direction.FWD)]
        if model.phase == Phase.TRAIN:
            directions.append(("bwd", Direction.BWD))
        for key, direction in directions:
            name = f"{key}[{index}]"
            parts[("layer", key, index)] = _lower(
                build_layer_graph(model, par, direction, decode=decode, kv_len=kv), hw, model, keep, f"layer.{name}")
            for part in ("embedding", "head"):
                parts[(part, key, index)] = _lower(
                    build_endpoint_graph(model, par, part, direction, decode=decode, kv_len=kv),
                    hw, model, keep, f"{part}.{name}")
    return parts


def prepare_workload(
    model: ModelSpec,
    hardware: HardwareSpec,
    topology: TopologySpec,
    par: ParallelismConfig,
    settings: RunSettings,
    mode: Optional[Union[ExecutionMode, str]] = None,
    *,
    keep_graphs: bool = False,
) -> Workload:
    """Build, cost and lower the graphs of one configuration, and size its memory."""
    mode = ExecutionMode(mode or settings.mode)
    check_parallelism(model, par, topology)
    check_sharding(model, par)
    if mode == ExecutionMode.HIERARCHICAL:
        check_hierarchical(par, topology)

    graph_args = dict(exact_decode=settings.exact_decode, decode_bucket_ratio=settings.decode_bucket_ratio)
    if mode == ExecutionMode.FLATTENED:
        graph = build_full_graph(model, par, **graph_args)
        memory = is_feasible(model, par, hardware, graph)
        costs = cost_graph(graph, hardware, model.dtype)
        traces = linearize(graph, costs)
        workload = Workload(model, hardware, par, settings, mode, memory, traces)
        if keep_graphs:
            workload.graph, workload.costs = graph, costs
        return workload

    # one replica is enough to size memory; every replica is identical
    memory = is_feasible(model, par, hardware, build_full_graph(model, par, replicas=(0,), **graph_args))
    parts = _hierarchical_parts(model, par, hardware, settings, keep_graphs)
    return Workload(model, hardware, par, settings, mode, memory, parts=parts)


def workload_for(bundle: SpecBundle, mode: Optional[Union[ExecutionMode, str]] = None,
                 keep_graphs: bool = False) -> Workload:
    return prepare_workload(bundle.model, bundle.hardware, bundle.topology, bundle.parallelism,
                            bundle.run.settings, mode, keep_graphs=keep_graphs)


def _require_feasible(workload: Workload) -> None:
    if not workload.memory.feasible:
        raise InfeasibleConfigError(workload.config_id, workload.memory.total_bytes, workload.memory.capacity_bytes)


def _result(workload: Workload, sim: SimResult, phases: Dict[str, float]) -> RunResult:
    return RunResult(config_id=workload.config_id, mode=workload.mode.value, total_time=sim.total_time,
                     sim=sim, memory=workload.memory, phases=phases,
                     parallelism=workload.parallelism)


def run(
    bundle: SpecBundle,
    mode: Optional[Union[ExecutionMode, str]] = None,
    *,
    net: Optional[Network] = None,
    timeline: bool = False,
    record_flows: bool = False,
    workload: Optional[Workload] = None,
) -> RunResult:
    """Simulate one configuration end to end. Infeasible configurations raise."""
    mode = ExecutionMode(mode or bundle.run.settings.mode)
    if workload is None:
        workload = workload_for(bundle, mode)
    _require_feasible(workload)
    if net is None:
        net = prepare_network(bundle.topology, bundle.faults)
    sim, phases = workload.simulate(net, timeline=timeline, record_flows=record_flows)
    logger.info(f"[run] {workload.config_id} ({mode.value}): {sim.total_time:.6g} s")
    return _result(workload, sim, phases)


def run_flattened(bundle: SpecBundle, **kwargs: Any) -> RunResult:
    """Full per-rank traces of the whole run on one global timeline."""
    return run(bundle, ExecutionMode.FLATTENED, **kwargs)


def run_hierarchical(bundle: SpecBundle, **kwargs: Any) -> RunResult:
    """Layer graphs simulated once, composed into a pipeline of stage blocks."""
    return run(bundle, ExecutionMode.HIERARCHICAL, **kwargs)


# Worker pool

_WORKER_STATE: Dict[str, Any] = {}


def _worker_init(state: Dict[str, Any]) -> None:
    global _WORKER_STATE
    _WORKER_STATE = state


def _map_jobs(fn: Callable[[Any], Any], items: Sequence[Any], state: Dict[str, Any], jobs: int, desc: str) -> List[Any]:
    """Apply `fn` to every item, in input order, optionally on a process pool."""
    if jobs <= 1 or len(items) <= 1:
        _worker_init(state)
        return [fn(item) for item in tqdm(items, desc=desc, disable=None, leave=False)]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(state,)) as executor:
        return list(tqdm(executor.map(fn, items), total=len(items), desc=desc, disable=None, leave=False))


# Sweep

def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def enumerate_parallelisms(
    model: ModelSpec,
    topology: TopologySpec,
    base: ParallelismConfig,
    grid: Optional[SweepGrid] = None,
) -> Tuple[List[ParallelismConfig], List[PrunedCandidate]]:
    """Every dp*tp*pp*cp factorization of the GPU count crossed with the grid's knobs."""
    grid = grid or SweepGrid()
    n = topology.num_ranks
    tps = grid.tp or _divisors(n)
    pps = grid.pp or _divisors(n)
    cps = grid.cp or [base.cp]
    mbs = grid.microbatches or [base.num_microbatches]
    zeros = grid.zero_stages or [base.zero_stage]
    recomputes = grid.recompute or [base.recompute]
    sps = grid.sp if grid.sp is not None else [base.sp_enabled]

    candidates: Dict[str, ParallelismConfig] = {}
    pruned: Dict[str, PrunedCandidate] = {}
    for tp, pp, cp, mb, zero, recompute, sp in product(tps, pps, cps, mbs, zeros, recomputes, sps):
        if n % (tp * pp * cp):
            continue
        par = base.model_copy(update=dict(
            dp=n // (tp * pp * cp), tp=tp, pp=pp, cp=cp, num_microbatches=mb,
            zero_stage=zero, recompute=recompute, sp_enabled=sp and tp > 1,
        ))
        cid = par.config_id
        if cid in candidates or cid in pruned:
            continue
        try:
            check_parallelism(model, par, topology)
            check_sharding(model, par)
        except SpecValidationError as e:
            pruned[cid] = PrunedCandidate(config_id=cid, reason=f"sharding: {e}", parallelism=par)
            logger.debug(f"[enumerate_parallelisms] pruned {cid}: {e}")
            continue
        candidates[cid] = par
    return [candidates[k] for k in sorted(candidates)], [pruned[k] for k in sorted(pruned)]


def _sweep_task(par: ParallelismConfig) -> Union[RunResult, PrunedCandidate]:
    state = _WORKER_STATE
    bundle: SpecBundle = state["bundle"]
    mode: ExecutionMode = state["mode"]
    if mode == ExecutionMode.HIERARCHICAL:
        try:
            check_hierarchical(par, bundle.topology)
        except HierarchicalConstraintError as e:
            logger.warning(f"[sweep] {par.config_id}: {e}; using flattened mode")
            mode = ExecutionMode.FLATTENED
    workload = prepare_workload(bundle.model, bundle.hardware, bundle.topology, par, bundle.run.settings, mode)
    if not workload.memory.feasible:
        m = workload.memory
        logger.debug(f"[sweep] pruned {par.config_id}: memory")
        return PrunedCandidate(
            config_id=par.config_id,
            reason=f"memory: stage {m.stage} needs {m.total_bytes} bytes, capacity {m.capacity_bytes}",
            memory=m,
            parallelism=par,
        )
    sim, phases = workload.simulate(state["net"])
    return _result(workload, sim, phases)


def sweep(
    bundle: SpecBundle,
    grid: Optional[SweepGrid] = None,
    *,
    mode: Optional[Union[ExecutionMode, str]] = None,
    jobs: int = 1,
) -> SweepReport:
    """Memory-prune every candidate parallelism, simulate the survivors, fastest first."""
    mode = ExecutionMode(mode or bundle.run.settings.mode)
    grid = grid if grid is not None else bundle.run.sweep
    candidates, pruned = enumerate_parallelisms(bundle.model, bundle.topology, bundle.parallelism, grid)
    state = {"bundle": bundle, "mode": mode, "net": prepare_network(bundle.topology, bundle.faults)}
    outcomes = _map_jobs(_sweep_task, candidates, state, jobs, "sweep")
    results = [o for o in outcomes if isinstance(o, RunResult)]
    pruned += [o for o in outcomes if isinstance(o, PrunedCandidate)]
    results.sort(key=lambda r: (r.total_time, r.config_id))
    pruned.sort(key=lambda p: p.config_id)
    logger.info(f"[sweep] {len(results)} feasible, {len(pruned)} pruned of {len(results) + len(pruned)}")
    return SweepReport(results=results, pruned=pruned)


# Fault Monte Carlo

def _link_label(a: int, b: int) -> str:
    return f"{a}-{b}"


def _fault_task(item: Tuple[int, np.random.SeedSequence]) -> FaultSample:
    iteration, seed = item
    state = _WORKER_STATE
    base: Network = state["net"]
    already = {link.key for link in fault_summary(base)}
    net = apply_faults(base, FaultSpec(generator=state["generator"]), np.random.default_rng(seed))
    sampled = [link for link in fault_summary(net) if link.key not in already]
    sim, _ = state["workload"].simulate(net)
    return FaultSample(
        iteration=iteration,
        faulted_links=[_link_label(link.a, link.b) for link in sampled],
        derates=[link.effective_bw / link.nominal_bw for link in sampled],
        total_time=sim.total_time,
        degradation=sim.total_time / state["baseline"],
    )


def fault_monte_carlo(
    bundle: SpecBundle,
    generator: Optional[FaultGenerator] = None,
    iterations: Optional[int] = None,
    *,
    mode: Optional[Union[ExecutionMode, str]] = None,
    jobs: int = 1,
) -> DegradationSummary:
    """Distribution of faulted over fault-free step time across independent fault draws."""
    settings = bundle.run.monte_carlo or MonteCarloSettings()
    generator = generator or settings.generator
    iterations = settings.iterations if iterations is None else iterations
    if iterations < 1:
        raise SpecValidationError("monte carlo iterations", f"need at least one iteration, got {iterations}")

    workload = workload_for(bundle, ExecutionMode(mode or bundle.run.settings.mode))
    _require_feasible(workload)
    # explicit faults stay in place for every iteration; the generator adds the sampled ones
    base = prepare_network(bundle.topology, FaultSpec(faults=bundle.faults.faults))
    baseline, _ = workload.simulate(base)
    if baseline.total_time <= 0:
        raise SpecValidationError("monte carlo baseline", "the fault-free run takes no time")

    seeds = np.random.SeedSequence(generator.rng_seed).spawn(iterations)
    state = {"net": base, "generator": generator, "workload": workload, "baseline": baseline.total_time}
    samples = _map_jobs(_fault_task, list(enumerate(seeds)), state, jobs, "faults")
    samples.sort(key=lambda s: s.iteration)

    ratios = np.array([s.degradation for s in samples])
    p5, p25, median, p75, p95 = np.percentile(ratios, [5, 25, 50, 75, 95])
    logger.info(f"[fault_monte_carlo] {workload.config_id}: median degradation {median:.4f} over {iterations}")
    return DegradationSummary(
        config_id=workload.config_id,
        fault_free_time=baseline.total_time,
        iterations=iterations,
        min=float(ratios.min()),
        p5=float(p5),
        p25=float(p25),
        median=float(median),
        p75=float(p75),
        p95=float(p95),
        max=float(ratios.max()),
        mean=float(ratios.mean()),
        samples=samples,
    )


# Hardware what-if

def hardware_variant(base: HardwareSpec, overrides: Optional[Mapping[str, Any]] = None,
                     scale: Optional[Mapping[str, float]] = None) -> HardwareSpec:
    """Copy of `base` with fields replaced (`overrides`) or multiplied (`scale`).

    The bandwidth and capacity ordering checks are not re-run: stacked-memory
    variants may legitimately put HBM bandwidth above L2.
    """
    update: Dict[str, Any] = {}
    for name, value in (overrides or {}).items():
        if name not in HardwareSpec.model_fields:
            raise SpecParseError(f"hardware.{name}", "unknown hardware field")
        update[name] = value
    for name, factor in (scale or {}).items():
        if name not in HardwareSpec.model_fields:
            raise SpecParseError(f"hardware.{name}", "unknown hardware field")
        current = update.get(name, getattr(base, name))
        if not isinstance(current, (int, float)) or isinstance(current, bool):
            raise SpecParseError(f"hardware.{name}", "only numeric fields can be scaled")
        scaled = current * factor
        update[name] = int(round(scaled)) if isinstance(current, int) else float(scaled)
    return base.model_copy(update=update)


GB = 10 ** 9


def design_cases(base: HardwareSpec, throttle: float = 0.73) -> Dict[str, Tuple[str, HardwareSpec]]:
    """Base plus the four memory-system design points, in report order."""
    stacked = hardware_variant(base, scale={"hbm_bw": 4.0})
    return {
        "Base": ("baseline hardware", base),
        "A": ("stacked L2: l2_capacity x2.5", hardware_variant(base, scale={"l2_capacity": 2.5})),
        "B": ("larger HBM: hbm_capacity 160 GB", hardware_variant(base, overrides={"hbm_capacity": 160 * GB})),
        "C": ("stacked DRAM: hbm_bw x4", stacked),
        "D": (f"stacked DRAM throttled: hbm_bw x4 x{throttle:g}",
              hardware_variant(stacked, scale={"hbm_bw": throttle})),
    }


def whatif(
    bundle: SpecBundle,
    settings: Optional[WhatIfSettings] = None,
    *,
    mode: Optional[Union[ExecutionMode, str]] = None,
) -> List[CaseResult]:
    """Run the same workload on each hardware case; speedups are relative to Base."""
    settings = settings or bundle.run.whatif or WhatIfSettings()
    cases = design_cases(bundle.hardware, settings.throttle)
    wanted = settings.cases or list(cases)
    unknown = [c for c in wanted if c not in cases]
    if unknown:
        raise SpecParseError("run.whatif.cases", f"unknown case(s) {unknown}; known: {list(cases)}")
    if "Base" not in wanted:
        wanted = ["Base"] + wanted

    net = prepare_network(bundle.topology, bundle.faults)
    results: List[CaseResult] = []
    base_time: Optional[float] = None
    for name in wanted:
        description, hw = cases[name]
        workload = workload_for(bundle._replace(hardware=hw), mode)
        if not workload.memory.feasible:
            m = workload.memory
            results.append(CaseResult(case=name, description=description, feasible=False, memory=m,
                                      reason=f"needs {m.total_bytes} bytes, capacity {m.capacity_bytes}"))
            continue
        sim, _ = workload.simulate(net)
        if name == "Base":
            base_time = sim.total_time
        speedup = base_time / sim.total_time if base_time and sim.total_time > 0 else None
        results.append(CaseResult(case=name, description=description, feasible=True, total_time=sim.total_time,
                                  speedup=speedup, memory=workload.memory))
    logger.info(f"[whatif] {len(results)} case(s) for {bundle.parallelism.config_id}")
    return results
