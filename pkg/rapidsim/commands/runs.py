"""The `run` command: one configuration end to end."""
import argparse
import logging
from pathlib import Path

from rapidsim import reports
from rapidsim.commands.common import (
    add_input_args,
    add_output_args,
    gigabytes,
    load_bundle,
    out_dir,
    seconds,
)
from rapidsim.orchestrator import prepare_network, run, workload_for
from rapidsim.trace import write_traces

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("run", help="simulate one configuration")
    add_input_args(parser)
    add_output_args(parser)
    parser.add_argument("--timeline", metavar="CSV", help="write the event timeline")
    parser.add_argument("--emit-traces", metavar="DIR", help="write one trace file per rank")
    parser.add_argument("--dump-op-costs", metavar="CSV", help="write the cost of every compute node")
    parser.set_defaults(handler=handle_run)


def handle_run(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    keep = bool(args.dump_op_costs)
    workload = workload_for(bundle, bundle.run.settings.mode, keep_graphs=keep)
    net = prepare_network(bundle.topology, bundle.faults)
    result = run(bundle, net=net, workload=workload, timeline=bool(args.timeline))

    out = out_dir(args)
    written = reports.write_run(result, out, args.format)
    if args.timeline:
        written.append(reports.write_timeline(result.sim, args.timeline))
    if args.emit_traces:
        written += write_traces(workload.traces, args.emit_traces)
    if args.dump_op_costs:
        if workload.graph is not None:
            written.append(reports.write_op_costs(workload.graph, workload.costs, args.dump_op_costs))
        for part in sorted(workload.parts.values(), key=lambda p: p.name):
            path = Path(args.dump_op_costs)
            target = path.with_name(f"{path.stem}.{part.name}{path.suffix}")
            written.append(reports.write_op_costs(part.graph, part.costs, target))

    b = result.sim.breakdown()
    m = result.memory
    print(f"{result.config_id} ({result.mode}) on {bundle.topology.num_ranks} GPUs")
    print(f"  total time   {seconds(result.total_time)}")
    print(f"  per rank     compute {seconds(b['compute'])}  comm {seconds(b['comm'])}  idle {seconds(b['idle'])}")
    print(f"  memory       {gigabytes(m.total_bytes)} of {gigabytes(m.capacity_bytes)} (stage {m.stage})")
    logger.info(f"[handle_run] wrote {len(written)} file(s) under {out}")
    return 0
