"""Parsing, validation and normalization of the three input documents."""
import json
import logging
import math
import re
from typing import Any, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from rapidsim.config import get_seed_override
from rapidsim.errors import SpecParseError, SpecValidationError
from rapidsim.schema.specs import (
    Axis,
    BaseTopology,
    FaultSpec,
    HardwareSpec,
    InvariantError,
    ModelSpec,
    ParallelismConfig,
    RunDoc,
    TopologyDoc,
    TopologySpec,
)

logger = logging.getLogger(__name__)

Document = Union[str, bytes, Mapping[str, Any]]
M = TypeVar("M", bound=BaseModel)


class SpecBundle(NamedTuple):
    """Everything one simulation needs, fully validated."""
    model: ModelSpec
    hardware: HardwareSpec
    topology: TopologySpec
    parallelism: ParallelismConfig
    faults: FaultSpec
    run: RunDoc


# Canonical preset name -> (dimension bases, diagonal dims)
PRESETS: Dict[str, Tuple[Tuple[BaseTopology, ...], Optional[Tuple[int, int]]]] = {
    "Ring": ((BaseTopology.RING,), None),
    "Mesh1D": ((BaseTopology.MESH1D,), None),
    "FullyConnected": ((BaseTopology.FULLY_CONNECTED,), None),
    "Switch": ((BaseTopology.SWITCH,), None),
    "Torus2D": ((BaseTopology.RING, BaseTopology.RING), None),
    "Torus3D": ((BaseTopology.RING,) * 3, None),
    "Mesh2D": ((BaseTopology.MESH1D, BaseTopology.MESH1D), None),
    "KingMesh2D": ((BaseTopology.MESH1D, BaseTopology.MESH1D), (0, 1)),
    "HyperCube": ((), None),  # arity follows log2 of the node count
}

_ALIASES = {
    "ring": "Ring",
    "mesh": "Mesh1D",
    "mesh1d": "Mesh1D",
    "line": "Mesh1D",
    "fullyconnected": "FullyConnected",
    "fc": "FullyConnected",
    "switch": "Switch",
    "torus": "Torus2D",
    "torus2d": "Torus2D",
    "torus3d": "Torus3D",
    "mesh2d": "Mesh2D",
    "kingmesh": "KingMesh2D",
    "kingmesh2d": "KingMesh2D",
    "hypercube": "HyperCube",
}


def _normalize_preset_name(name: str) -> str:
    key = re.sub(r"[^a-z0-9]", "", name.lower())
    if key not in _ALIASES:
        raise SpecValidationError(
            "topology preset", f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}"
        )
    return _ALIASES[key]


def _per_dim(value: Union[float, Sequence[float]], arity: int, field: str) -> Tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),) * arity
    values = tuple(float(v) for v in value)
    if len(values) != arity:
        raise SpecValidationError("preset arity", f"{field} has {len(values)} entries for {arity} dimensions")
    return values


def resolve_topology_preset(
    name: str,
    node_counts: Sequence[int],
    link_params: Mapping[str, Any],
) -> TopologySpec:
    """Expand a named preset into its dimension stack.

    `link_params` carries `link_bw` and optionally `link_latency`, each either a
    scalar or one value per expanded dimension.
    """
    canonical = _normalize_preset_name(name)
    bases, diagonal = PRESETS[canonical]
    counts = [int(n) for n in node_counts]

    if canonical == "HyperCube":
        if len(counts) == 1:
            n = counts[0]
            k = int(round(math.log2(n))) if n >= 2 else 0
            if n < 2 or 2 ** k != n:
                raise SpecValidationError("preset arity", f"HyperCube needs a power-of-two node count, got {n}")
            counts = [2] * k
        elif any(c != 2 for c in counts):
            raise SpecValidationError("preset arity", f"HyperCube dimensions all have 2 nodes, got {counts}")
        bases = (BaseTopology.RING,) * len(counts)

    if len(counts) != len(bases):
        raise SpecValidationError(
            "preset arity", f"{canonical} has {len(bases)} dimension(s), got node_counts {list(node_counts)}"
        )

    if "link_bw" not in link_params or link_params["link_bw"] is None:
        raise SpecParseError("topology.link_bw", "field required for presets")
    bws = _per_dim(link_params["link_bw"], len(bases), "link_bw")
    lats = _per_dim(link_params.get("link_latency", 0.0) or 0.0, len(bases), "link_latency")

    doc = {
        "dims": [
            {"base": b.value, "node_count": n, "link_bw": bw, "link_latency": lat}
            for b, n, bw, lat in zip(bases, counts, bws, lats)
        ],
        "diagonal_dims": diagonal,
        "name": canonical,
    }
    return validate_document(TopologySpec, doc, "topology")


def _load(doc: Document, document: str) -> Dict[str, Any]:
    if isinstance(doc, (str, bytes)):
        try:
            loaded = json.loads(doc)
        except json.JSONDecodeError as e:
            raise SpecParseError(document, f"malformed JSON at line {e.lineno} column {e.colno}: {e.msg}")
    else:
        loaded = dict(doc)
    if not isinstance(loaded, dict):
        raise SpecParseError(document, "top level must be an object")
    return loaded


def validate_document(model_class: Type[M], data: Any, document: str) -> M:
    """Validate `data` against `model_class`, translating pydantic errors."""
    try:
        return model_class.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        error = (first.get("ctx") or {}).get("error")
        if isinstance(error, InvariantError):
            raise SpecValidationError(error.invariant, error.message) from None
        msg = first.get("msg", "invalid value")
        found = re.search(r"invariant '([^']+)': (.*)", msg)
        if found:
            raise SpecValidationError(found.group(1), found.group(2)) from None
        loc = ".".join(str(p) for p in first.get("loc", ()))
        field = f"{document}.{loc}" if loc else document
        raise SpecParseError(field, msg) from None


def _topology_from_doc(doc: TopologyDoc) -> TopologySpec:
    if doc.preset is not None:
        return resolve_topology_preset(
            doc.preset,
            doc.node_counts or [],
            {"link_bw": doc.link_bw, "link_latency": doc.link_latency},
        )
    return validate_document(
        TopologySpec,
        {"dims": doc.dims, "diagonal_dims": doc.diagonal_dims, "name": doc.name},
        "run.topology",
    )


def check_parallelism(model: ModelSpec, par: ParallelismConfig, topology: TopologySpec) -> None:
    """Cross-document checks shared by parse_specs and the sweep."""
    if par.world_size != topology.num_ranks:
        raise SpecValidationError(
            "parallelism product",
            f"dp*tp*pp*cp = {par.dp}*{par.tp}*{par.pp}*{par.cp} = {par.world_size}, "
            f"topology has {topology.num_ranks} GPUs",
        )
    replicas = par.dp * par.num_microbatches
    if model.batch_size % replicas:
        raise SpecValidationError(
            "microbatch divisibility",
            f"batch_size {model.batch_size} is not divisible by dp*num_microbatches = {replicas}",
        )


def parse_specs(model_doc: Document, hardware_doc: Document, run_doc: Document) -> SpecBundle:
    """Parse and validate the model, hardware and run documents."""
    model = validate_document(ModelSpec, _load(model_doc, "model"), "model")
    hardware = validate_document(HardwareSpec, _load(hardware_doc, "hardware"), "hardware")
    run = validate_document(RunDoc, _load(run_doc, "run"), "run")

    seed = get_seed_override()
    if seed is not None:
        run = apply_seed(run, seed)

    topology = _topology_from_doc(run.topology)
    # keep the resolved stack so serialize_specs round-trips exactly
    resolved = TopologyDoc(
        dims=list(topology.dims), diagonal_dims=topology.diagonal_dims, name=topology.name
    )
    run = run.model_copy(update={"topology": resolved})
    par = run.parallelism
    check_parallelism(model, par, topology)
    if par.num_microbatches < par.pp:
        logger.warning(
            f"[parse_specs] num_microbatches={par.num_microbatches} < pp={par.pp}; "
            "the pipeline never reaches steady state"
        )
    return SpecBundle(model, hardware, topology, par, run.faults, run)


def apply_seed(run: RunDoc, seed: int) -> RunDoc:
    """Replace every rng seed in the run document."""
    update: Dict[str, Any] = {"settings": run.settings.model_copy(update={"rng_seed": seed})}
    if run.faults.generator is not None:
        generator = run.faults.generator.model_copy(update={"rng_seed": seed})
        update["faults"] = run.faults.model_copy(update={"generator": generator})
    if run.monte_carlo is not None:
        generator = run.monte_carlo.generator.model_copy(update={"rng_seed": seed})
        update["monte_carlo"] = run.monte_carlo.model_copy(update={"generator": generator})
    return run.model_copy(update=update)


def serialize_specs(bundle: SpecBundle) -> Tuple[Dict[str, Any], Dict[str, Any], Dict[str, Any]]:
    """Documents that parse back to an identical bundle."""
    model_doc = bundle.model.model_dump(mode="json")
    hardware_doc = bundle.hardware.model_dump(mode="json")
    run_doc = bundle.run.model_dump(mode="json")
    return model_doc, hardware_doc, run_doc


def axis_strides(par: ParallelismConfig) -> Dict[Axis, int]:
    strides: Dict[Axis, int] = {}
    stride = 1
    for axis in par.axis_order:
        strides[axis] = stride
        stride *= par.degree(axis)
    return strides


def map_axes_to_dims(par: ParallelismConfig, topology: TopologySpec) -> Dict[Axis, Tuple[int, ...]]:
    """Topology dimensions each parallelism axis spans (rank strides vs dim strides)."""
    strides = axis_strides(par)
    dim_ranges = []
    stride = 1
    for dim in topology.dims:
        dim_ranges.append((stride, stride * dim.node_count))
        stride *= dim.node_count
    spans: Dict[Axis, Tuple[int, ...]] = {}
    for axis in par.axis_order:
        degree = par.degree(axis)
        if degree == 1:
            spans[axis] = ()
            continue
        lo, hi = strides[axis], strides[axis] * degree
        spans[axis] = tuple(d for d, (a, b) in enumerate(dim_ranges) if lo < b and hi > a)
    return spans
