"""Arguments and input loading shared by every command."""
import argparse
import logging
from pathlib import Path
from typing import Optional

from rapidsim.config import RESULTS_DIR, get_default_jobs
from rapidsim.errors import MissingInputError
from rapidsim.schema.specs import ExecutionMode
from rapidsim.specs import SpecBundle, apply_seed, parse_specs

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json")


def add_input_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="model spec (JSON)")
    parser.add_argument("--hw", required=True, help="hardware spec (JSON)")
    parser.add_argument("--run", required=True, help="run document: topology, parallelism, faults (JSON)")
    parser.add_argument("--mode", choices=[m.value for m in ExecutionMode], help="override run.settings.mode")
    parser.add_argument("--seed", type=int, help="override every rng seed")
    parser.add_argument("--exact-decode", action="store_true", help="simulate every decode step")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")


def add_output_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help=f"results directory (default {RESULTS_DIR})")
    parser.add_argument("--format", choices=FORMATS, default="csv")


def add_jobs_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=None, help="parallel simulations (default RAPIDSIM_JOBS)")


def read_document(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise MissingInputError(f"input file not found: {path}")
    return p.read_text(encoding="utf-8")


def load_bundle(args: argparse.Namespace) -> SpecBundle:
    """Parse the three input documents and apply command-line overrides."""
    bundle = parse_specs(read_document(args.model), read_document(args.hw), read_document(args.run))
    run = bundle.run
    if getattr(args, "seed", None) is not None:
        run = apply_seed(run, args.seed)
    update = {}
    if getattr(args, "mode", None):
        update["mode"] = ExecutionMode(args.mode)
    if getattr(args, "exact_decode", False):
        update["exact_decode"] = True
    if update:
        run = run.model_copy(update={"settings": run.settings.model_copy(update=update)})
    return bundle._replace(run=run, faults=run.faults)


def out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if getattr(args, "out", None) else RESULTS_DIR


def jobs(args: argparse.Namespace) -> int:
    value: Optional[int] = getattr(args, "jobs", None)
    return max(1, value) if value is not None else get_default_jobs()


def seconds(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6g} s"


def gigabytes(value: Optional[int]) -> str:
    return "-" if value is None else f"{value / 1e9:.2f} GB"
