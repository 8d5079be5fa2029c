"""Shared fixtures: shipped documents, a toy model and small networks."""
import json
from typing import Any, Dict, Optional

import pytest

from rapidsim.config import DATA_DIR
from rapidsim.schema.specs import HardwareSpec, ModelSpec, TopologySpec
from rapidsim.specs import SpecBundle, parse_specs
from rapidsim.topology import build_network


def read(name: str) -> Dict[str, Any]:
    return json.loads((DATA_DIR / name).read_text())


def make_bundle(model: str = "tiny.json", run: str = "ddp4.json", hw: str = "a100-80gb.json",
                model_update: Optional[Dict[str, Any]] = None,
                run_update: Optional[Dict[str, Any]] = None,
                hw_update: Optional[Dict[str, Any]] = None) -> SpecBundle:
    model_doc = {**read(model), **(model_update or {})}
    run_doc = {**read(run), **(run_update or {})}
    hw_doc = {**read(hw), **(hw_update or {})}
    return parse_specs(model_doc, hw_doc, run_doc)


def topology(*dims: Dict[str, Any]) -> TopologySpec:
    return TopologySpec.model_validate({"dims": list(dims)})


def dim(base: str, n: int, bw: float = 1e9, latency: float = 0.0) -> Dict[str, Any]:
    return {"base": base, "node_count": n, "link_bw": bw, "link_latency": latency}


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("RAPIDSIM_SEED", "RAPIDSIM_JOBS", "RAPIDSIM_DECODE_BUCKET_RATIO"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def a100() -> HardwareSpec:
    return HardwareSpec.model_validate(read("a100-80gb.json"))


@pytest.fixture
def tiny() -> ModelSpec:
    return ModelSpec.model_validate(read("tiny.json"))


@pytest.fixture
def tiny_inference() -> ModelSpec:
    return ModelSpec.model_validate({**read("tiny.json"), "phase": "inference", "prefill_len": 64, "decode_len": 8})


@pytest.fixture
def llama() -> ModelSpec:
    return ModelSpec.model_validate(read("llama2-7b.json"))


@pytest.fixture
def ddp_bundle() -> SpecBundle:
    return make_bundle()


@pytest.fixture
def ring4():
    return build_network(topology(dim("Ring", 4)))
