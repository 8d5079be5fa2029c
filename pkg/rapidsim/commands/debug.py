"""Inspection commands: dump-graph, dump-topology and validate-config."""
import argparse
import sys
from pathlib import Path
from typing import Optional

from rapidsim.commands.common import add_input_args, load_bundle
from rapidsim.graph import Direction, build_full_graph, build_layer_graph
from rapidsim.orchestrator import check_hierarchical, prepare_network
from rapidsim.schema.specs import ExecutionMode
from rapidsim.specs import map_axes_to_dims


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("dump-graph", help="print the operator graph as a dependency list")
    add_input_args(parser)
    parser.add_argument("--layer", choices=[d.value for d in Direction],
                        help="dump one layer graph instead of the full run")
    parser.add_argument("--out", help="write to a file instead of stdout")
    parser.set_defaults(handler=handle_dump_graph)

    parser = subparsers.add_parser("dump-topology", help="print links, fault state and optional routes")
    add_input_args(parser)
    parser.add_argument("--route", nargs=2, type=int, metavar=("SRC", "DST"), help="also print one route")
    parser.add_argument("--out", help="write to a file instead of stdout")
    parser.set_defaults(handler=handle_dump_topology)

    parser = subparsers.add_parser("validate-config", help="parse and check the input documents")
    add_input_args(parser)
    parser.set_defaults(handler=handle_validate)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def handle_dump_graph(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    settings = bundle.run.settings
    if args.layer:
        graph = build_layer_graph(bundle.model, bundle.parallelism, args.layer)
    else:
        graph = build_full_graph(bundle.model, bundle.parallelism, exact_decode=settings.exact_decode,
                                 decode_bucket_ratio=settings.decode_bucket_ratio)
    _emit(graph.to_text(), args.out)
    return 0


def handle_dump_topology(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    net = prepare_network(bundle.topology, bundle.faults)
    dims = " x ".join(f"{d.base.value}({d.node_count})" for d in bundle.topology.dims)
    lines = [f"# topology {bundle.topology.name or dims} ranks={net.num_ranks} nodes={net.num_nodes} "
             f"links={len(net.links)}"]
    for link in net.links:
        lines.append(f"{link.a} {link.b} dim={link.dim} state={link.state.value} "
                     f"bw={link.effective_bw:g}/{link.nominal_bw:g} latency={link.latency:g}")
    if args.route:
        route = net.route(*args.route)
        lines.append(f"route {route.src}->{route.dst}: {' '.join(str(n) for n in route.nodes)} "
                     f"hops={len(route)} latency={route.latency:g}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def handle_validate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    par = bundle.parallelism
    if bundle.run.settings.mode == ExecutionMode.HIERARCHICAL:
        check_hierarchical(par, bundle.topology)
    prepare_network(bundle.topology, bundle.faults)
    spans = map_axes_to_dims(par, bundle.topology)
    mapping = ", ".join(f"{axis.value}->{list(dims)}" for axis, dims in spans.items() if dims)
    print(f"ok: {bundle.model.name} {par.config_id} on {bundle.topology.num_ranks} GPUs"
          + (f" ({mapping})" if mapping else ""))
    return 0
