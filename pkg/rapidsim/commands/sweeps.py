"""The `sweep` and `whatif` commands."""
import argparse
import logging

from rapidsim import reports
from rapidsim.commands.common import (
    add_input_args,
    add_jobs_arg,
    add_output_args,
    gigabytes,
    jobs,
    load_bundle,
    out_dir,
    seconds,
)
from rapidsim.errors import NoFeasibleConfigError
from rapidsim.orchestrator import sweep, whatif
from rapidsim.schema.specs import WhatIfSettings

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("sweep", help="search the parallelism design space")
    add_input_args(parser)
    add_output_args(parser)
    add_jobs_arg(parser)
    parser.set_defaults(handler=handle_sweep)

    parser = subparsers.add_parser("whatif", help="compare the hardware design cases")
    add_input_args(parser)
    add_output_args(parser)
    parser.add_argument("--throttle", type=float, help="HBM bandwidth multiplier of case D")
    parser.set_defaults(handler=handle_whatif)


def handle_sweep(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    report = sweep(bundle, jobs=jobs(args))
    reports.write_sweep(report, out_dir(args), args.format)

    print(f"{report.candidates} candidate(s): {len(report.results)} simulated, {len(report.pruned)} pruned")
    for i, result in enumerate(report.results[:10]):
        print(f"  {i + 1:>3}. {result.config_id:<40} {seconds(result.total_time)}")
    if not report.results:
        raise NoFeasibleConfigError(f"all {report.candidates} candidate(s) were pruned; see the sweep output")
    best, worst = report.results[0], report.results[-1]
    print(f"best {best.config_id}, worst/best = {worst.total_time / best.total_time:.3g}")
    return 0


def handle_whatif(args: argparse.Namespace) -> int:
    bundle = load_bundle(args)
    settings = bundle.run.whatif or WhatIfSettings()
    if args.throttle is not None:
        settings = WhatIfSettings.model_validate({**settings.model_dump(), "throttle": args.throttle})
    cases = whatif(bundle, settings)
    reports.write_whatif(cases, out_dir(args), args.format)

    for c in cases:
        if c.feasible:
            speedup = f"x{c.speedup:.3g}" if c.speedup is not None else "-"
            print(f"  {c.case:<5} {seconds(c.total_time):>14}  {speedup:>8}  {c.description}")
        else:
            print(f"  {c.case:<5} {'infeasible':>14}  {gigabytes(c.memory.total_bytes) if c.memory else '':>8}  "
                  f"{c.description}")
    return 0
