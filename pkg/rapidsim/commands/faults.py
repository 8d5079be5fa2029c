"""The `faults` command: Monte Carlo over single-link soft faults."""
import argparse

from rapidsim import reports
from rapidsim.commands.common import add_input_args, add_jobs_arg, add_output_args, jobs, load_bundle, out_dir, seconds
from rapidsim.orchestrator import fault_monte_carlo


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("faults", help="fault-injection Monte Carlo")
    add_input_args(parser)
    add_output_args(parser)
    add_jobs_arg(parser)
    parser.add_argument("--iters", type=int, help="iterations (default run.monte_carlo.iterations)")
    parser.set_defaults(handler=handle_faults)


def handle_faults(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    summary = fault_monte_carlo(bundle, iterations=args.iters, jobs=jobs(args))
    reports.write_faults(summary, out_dir(args), args.format)

    print(f"{summary.config_id}: fault-free {seconds(summary.fault_free_time)}, {summary.iterations} iteration(s)")
    print(f"  degradation min {summary.min:.4f}  median {summary.median:.4f}  "
          f"p95 {summary.p95:.4f}  max {summary.max:.4f}")
    return 0
