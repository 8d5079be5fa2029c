"""CSV and JSON result files. Column orders are frozen; bump CSV_SCHEMA_VERSION when they change."""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

from pydantic import BaseModel

from rapidsim.config import CSV_SCHEMA_VERSION
from rapidsim.graph import OperatorGraph
from rapidsim.models import CaseResult, DegradationSummary, MemoryReport, RunResult, SimResult, SweepReport
from rapidsim.perfmodel import OpCost

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Units: seconds (_s), bytes, bytes/s
RUN_COLUMNS = (
    "schema_version", "config_id", "mode", "total_time_s", "compute_s", "comm_s", "idle_s",
    "memory_total_bytes", "memory_capacity_bytes", "memory_headroom_bytes",
)
RANK_COLUMNS = ("schema_version", "rank", "compute_s", "comm_s", "idle_s")
LINK_COLUMNS = ("schema_version", "a", "b", "dim", "busy_time_s", "bytes", "max_flows", "utilization")
TIMELINE_COLUMNS = ("schema_version", "rank", "event_id", "name", "kind", "start_s", "end_s")
SWEEP_COLUMNS = (
    "schema_version", "position", "config_id", "status", "dp", "tp", "pp", "cp", "microbatches",
    "zero_stage", "recompute", "sp", "total_time_s", "compute_s", "comm_s", "idle_s",
    "memory_total_bytes", "memory_capacity_bytes", "reason",
)
FAULT_COLUMNS = ("schema_version", "config_id", "iteration", "total_time_s", "degradation", "faulted_links", "derates")
FAULT_SUMMARY_COLUMNS = (
    "schema_version", "config_id", "fault_free_time_s", "iterations",
    "min", "p5", "p25", "median", "p75", "p95", "max", "mean",
)
WHATIF_COLUMNS = (
    "schema_version", "case", "description", "feasible", "total_time_s", "speedup",
    "memory_total_bytes", "memory_capacity_bytes", "reason",
)
OP_COST_COLUMNS = (
    "schema_version", "node_id", "name", "kind", "rank", "phase", "layer", "microbatch", "repeat",
    "seconds", "flops", "hbm_bytes", "l2_bytes", "sram_bytes", "bound", "tile",
)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(getattr(value, "value", value))


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(CSV_SCHEMA_VERSION if c == "schema_version" else row.get(c)) for c in columns])
    return path


def write_json(path: PathLike, document: Union[BaseModel, List[BaseModel], Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(document, BaseModel):
        data = document.model_dump(mode="json")
    elif isinstance(document, list):
        data = [d.model_dump(mode="json") for d in document]
    else:
        data = document
    path.write_text(json.dumps({"schema_version": CSV_SCHEMA_VERSION, "data": data}, indent=2) + "\n",
                    encoding="utf-8")
    return path


# Rows

def _memory_cells(memory: Optional[MemoryReport]) -> Dict[str, Any]:
    if memory is None:
        return {}
    return {"memory_total_bytes": memory.total_bytes, "memory_capacity_bytes": memory.capacity_bytes,
            "memory_headroom_bytes": memory.headroom_bytes}


def run_row(result: RunResult) -> Dict[str, Any]:
    breakdown = result.sim.breakdown()
    return {
        "config_id": result.config_id, "mode": result.mode, "total_time_s": result.total_time,
        "compute_s": breakdown["compute"], "comm_s": breakdown["comm"], "idle_s": breakdown["idle"],
        **_memory_cells(result.memory),
    }


def rank_rows(sim: SimResult) -> List[Dict[str, Any]]:
    return [{"rank": r.rank, "compute_s": r.compute, "comm_s": r.comm, "idle_s": r.idle} for r in sim.ranks]


def link_rows(sim: SimResult) -> List[Dict[str, Any]]:
    rows = []
    for link in sim.links:
        utilization = link.busy_time / sim.total_time if sim.total_time > 0 else 0.0
        rows.append({"a": link.a, "b": link.b, "dim": link.dim, "busy_time_s": link.busy_time,
                     "bytes": link.bytes, "max_flows": link.max_flows, "utilization": utilization})
    return rows


def sweep_rows(report: SweepReport) -> List[Dict[str, Any]]:
    rows = []
    for i, result in enumerate(report.results):
        row = run_row(result)
        row.update(position=i + 1, status="ok")
        rows.append(row)
    for p in report.pruned:
        rows.append({"config_id": p.config_id, "status": "pruned", "reason": p.reason, **_memory_cells(p.memory)})
    for row, par in zip(rows, [r.parallelism for r in report.results] + [p.parallelism for p in report.pruned]):
        if par is not None:
            row.update(dp=par.dp, tp=par.tp, pp=par.pp, cp=par.cp, microbatches=par.num_microbatches,
                       zero_stage=par.zero_stage, recompute=par.recompute, sp=par.sp_enabled)
    return rows


def fault_rows(summary: DegradationSummary) -> List[Dict[str, Any]]:
    return [
        {"config_id": summary.config_id, "iteration": s.iteration, "total_time_s": s.total_time,
         "degradation": s.degradation, "faulted_links": ";".join(s.faulted_links),
         "derates": ";".join(repr(d) for d in s.derates)}
        for s in summary.samples
    ]


def whatif_rows(cases: Sequence[CaseResult]) -> List[Dict[str, Any]]:
    return [
        {"case": c.case, "description": c.description, "feasible": c.feasible, "total_time_s": c.total_time,
         "speedup": c.speedup, "reason": c.reason, **_memory_cells(c.memory)}
        for c in cases
    ]


def op_cost_rows(graph: OperatorGraph, costs: Mapping[int, OpCost]) -> List[Dict[str, Any]]:
    rows = []
    for nid in sorted(costs):
        node, cost = graph.node(nid), costs[nid]
        traffic = cost.traffic
        rows.append({
            "node_id": nid, "name": node.name, "kind": node.kind, "rank": node.rank, "phase": node.phase,
            "layer": node.layer, "microbatch": node.microbatch, "repeat": node.repeat,
            "seconds": cost.seconds, "flops": cost.flops,
            "hbm_bytes": traffic.hbm_bytes if traffic else None,
            "l2_bytes": traffic.l2_bytes if traffic else None,
            "sram_bytes": traffic.sram_bytes if traffic else None,
            "bound": cost.bound, "tile": cost.tile,
        })
    return rows


# Writers

def write_run(result: RunResult, out_dir: PathLike, fmt: str = "csv") -> List[Path]:
    out = Path(out_dir)
    if fmt == "json":
        return [write_json(out / "run.json", result)]
    return [
        write_csv(out / "run.csv", RUN_COLUMNS, [run_row(result)]),
        write_csv(out / "ranks.csv", RANK_COLUMNS, rank_rows(result.sim)),
        write_csv(out / "links.csv", LINK_COLUMNS, link_rows(result.sim)),
    ]


def write_timeline(sim: SimResult, path: PathLike) -> Path:
    rows = [
        {"rank": e.rank, "event_id": e.event_id, "name": e.name, "kind": e.kind, "start_s": e.start, "end_s": e.end}
        for e in sim.timeline or []
    ]
    return write_csv(path, TIMELINE_COLUMNS, rows)


def write_sweep(report: SweepReport, out_dir: PathLike, fmt: str = "csv") -> List[Path]:
    out = Path(out_dir)
    if fmt == "json":
        return [write_json(out / "sweep.json", report)]
    return [write_csv(out / "sweep.csv", SWEEP_COLUMNS, sweep_rows(report))]


def _summary_row(summary: DegradationSummary) -> Dict[str, Any]:
    row = summary.model_dump(exclude={"samples"})
    row["fault_free_time_s"] = row.pop("fault_free_time")
    return row


def write_faults(summary: DegradationSummary, out_dir: PathLike, fmt: str = "csv") -> List[Path]:
    out = Path(out_dir)
    if fmt == "json":
        return [write_json(out / "faults.json", summary)]
    return [
        write_csv(out / "faults.csv", FAULT_COLUMNS, fault_rows(summary)),
        write_csv(out / "faults_summary.csv", FAULT_SUMMARY_COLUMNS, [_summary_row(summary)]),
    ]


def write_whatif(cases: Sequence[CaseResult], out_dir: PathLike, fmt: str = "csv") -> List[Path]:
    out = Path(out_dir)
    if fmt == "json":
        return [write_json(out / "whatif.json", list(cases))]
    return [write_csv(out / "whatif.csv", WHATIF_COLUMNS, whatif_rows(cases))]


def write_op_costs(graph: OperatorGraph, costs: Mapping[int, OpCost], path: PathLike) -> Path:
    return write_csv(path, OP_COST_COLUMNS, op_cost_rows(graph, costs))
