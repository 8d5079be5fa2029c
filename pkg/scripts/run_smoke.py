#!/usr/bin/env python3
"""Run the shipped fixtures end to end and print a PASS/FAIL summary."""

import json
import sys
import tempfile
from pathlib import Path

# Add the repository root to the path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from rapidsim.config import DATA_DIR
from rapidsim.main import main
from rapidsim.specs import parse_specs


TORUS_MODEL = {"num_layers": 8, "hidden_dim": 1024, "num_heads": 16, "ffn_dim": 4096, "vocab_size": 8192,
               "seq_len": 256, "batch_size": 64}


def _docs(model: str, run: str):
    return (
        (DATA_DIR / model).read_text(),
        (DATA_DIR / "a100-80gb.json").read_text(),
        (DATA_DIR / run).read_text(),
    )


def _cli(*argv: str) -> int:
    return main([str(a) for a in argv])


def check_fixtures():
    """Every shipped document parses."""
    print("=" * 60)
    print("FIXTURE PARSING")
    print("=" * 60)

    try:
        for model, run in [("llama2-7b.json", "ddp4.json"), ("llama2-7b.json", "torus16.json"),
                           ("tiny.json", "ddp4.json"), ("llama2-7b-inference.json", "ddp4.json")]:
            bundle = parse_specs(*_docs(model, run))
            print(f"✓ {model} + {run}: {bundle.parallelism.config_id} on {bundle.topology.num_ranks} GPUs")
    except Exception as e:
        print(f"✗ Parsing failed: {e}")
        return False

    print()
    return True


def check_runs(out: Path):
    """Flattened and hierarchical runs of the 4-GPU DDP fixture."""
    print("=" * 60)
    print("SINGLE RUNS")
    print("=" * 60)

    args = ["--model", DATA_DIR / "tiny.json", "--hw", DATA_DIR / "a100-80gb.json", "--run", DATA_DIR / "ddp4.json"]
    for mode in ("flattened", "hierarchical"):
        code = _cli("run", *args, "--mode", mode, "--out", out / mode, "--timeline", out / mode / "timeline.csv")
        if code != 0:
            print(f"✗ run --mode {mode} exited {code}")
            return False
        print(f"✓ run --mode {mode}: {sorted(p.name for p in (out / mode).iterdir())}")

    print()
    return True


def check_studies(out: Path):
    """Sweep, fault Monte Carlo and what-if on the 4-GPU fixture."""
    print("=" * 60)
    print("STUDIES")
    print("=" * 60)

    args = ["--model", DATA_DIR / "tiny.json", "--hw", DATA_DIR / "a100-80gb.json", "--run", DATA_DIR / "ddp4.json"]
    for command, extra in [("sweep", []), ("faults", ["--iters", 20, "--seed", 7]), ("whatif", [])]:
        code = _cli(command, *args, *extra, "--out", out / command)
        if code != 0:
            print(f"✗ {command} exited {code}")
            return False
        print(f"✓ {command}")

    print()
    return True


def check_torus_studies(out: Path):
    """Sweep, fault Monte Carlo and what-if on the 16-GPU torus fixture with a small model."""
    print("=" * 60)
    print("TORUS16 STUDIES")
    print("=" * 60)

    model = {**json.loads((DATA_DIR / "tiny.json").read_text()), **TORUS_MODEL}
    run = json.loads((DATA_DIR / "torus16.json").read_text())
    run["sweep"].update(tp=[1, 2, 4], pp=[1, 2, 4])
    (out / "torus-model.json").write_text(json.dumps(model))
    (out / "torus-run.json").write_text(json.dumps(run))

    args = ["--model", out / "torus-model.json", "--hw", DATA_DIR / "a100-80gb.json", "--run", out / "torus-run.json"]
    for command, extra in [("sweep", []), ("faults", ["--iters", 30, "--seed", 7]), ("whatif", [])]:
        code = _cli(command, *args, *extra, "--out", out / f"torus-{command}")
        if code != 0:
            print(f"✗ torus16 {command} exited {code}")
            return False
        print(f"✓ torus16 {command}")

    print()
    return True


def run_all_checks():
    """Run all checks."""
    print()
    print("=" * 60)
    print("RAPIDSIM SMOKE CHECKS")
    print("=" * 60)
    print()

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        results = []
        results.append(("Fixture Parsing", check_fixtures()))
        results.append(("Single Runs", check_runs(out)))
        results.append(("Studies", check_studies(out)))
        results.append(("Torus16 Studies", check_torus_studies(out)))

    # Summary
    print("=" * 60)
    print("SUMMARY")
    print("=" * 60)

    passed = sum(1 for _, result in results if result)
    total = len(results)

    for name, result in results:
        status = "✓ PASS" if result else "✗ FAIL"
        print(f"{status:>8} | {name}")

    print()
    print(f"Results: {passed}/{total} checks passed")

    if passed == total:
        print("✓ All checks passed.")
        return 0
    else:
        print("✗ Some checks failed. Check errors above.")
        return 1


if __name__ == "__main__":
    sys.exit(run_all_checks())
