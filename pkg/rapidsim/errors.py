"""Exception hierarchy shared by the simulator and the CLI."""
from typing import List, Optional, Sequence, Tuple


class RapidSimError(Exception):
    """Base class. `code` and `exit_code` feed the CLI error line."""
    code = "error"
    exit_code = 1


# Configuration errors (exit 2)

class SpecParseError(RapidSimError):
    """An input document does not match its schema."""
    code = "parse"
    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class SpecValidationError(RapidSimError):
    """A document parsed but violates a named invariant."""
    code = "invariant"
    exit_code = 2

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        self.message = message
        super().__init__(f"{invariant}: {message}")


class ShardingError(SpecValidationError):
    """A parallelism degree does not divide the dimension it shards."""
    code = "sharding"

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"{axis} sharding", message)


class HierarchicalConstraintError(SpecValidationError):
    code = "hierarchical"

    def __init__(self, message: str):
        super().__init__("hierarchical mapping", f"{message}; run with --mode flattened instead")


class FaultSpecError(SpecValidationError):
    code = "fault"

    def __init__(self, message: str):
        super().__init__("fault endpoints", message)


class PerfModelConfigError(RapidSimError):
    """Zero bandwidth or throughput reached the roofline."""
    code = "perfmodel"
    exit_code = 2


class MissingInputError(RapidSimError):
    code = "missing-file"
    exit_code = 5


class UsageError(RapidSimError):
    code = "usage"
    exit_code = 64


# Feasibility (exit 3)

class InfeasibleConfigError(RapidSimError):
    """Raised when a run is requested for a configuration that does not fit in HBM."""
    code = "infeasible"
    exit_code = 3

    def __init__(self, config_id: str, total_bytes: float, capacity_bytes: float):
        self.config_id = config_id
        self.total_bytes = total_bytes
        self.capacity_bytes = capacity_bytes
        super().__init__(
            f"{config_id} needs {total_bytes:.0f} bytes per GPU, capacity is {capacity_bytes:.0f}"
        )


class NoFeasibleConfigError(RapidSimError):
    """Every sweep candidate was pruned."""
    code = "infeasible"
    exit_code = 3


# Simulation errors (exit 4)

class SimulationError(RapidSimError):
    code = "simulation"
    exit_code = 4


class GraphCycleError(SimulationError):
    code = "graph-cycle"

    def __init__(self, cycle: Sequence[Tuple[int, int]]):
        self.cycle = list(cycle)
        super().__init__(f"operator graph is cyclic: {self.cycle}")


class TraceError(SimulationError):
    code = "trace"


class UncostedNodeError(TraceError):
    code = "uncosted"

    def __init__(self, node_id: int, name: str):
        self.node_id = node_id
        super().__init__(f"compute node {node_id} ({name}) has no cost")


class TraceFormatError(TraceError):
    code = "trace-format"

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class RoutingError(SimulationError):
    code = "routing"

    def __init__(self, src: int, dst: int, partition: Sequence[int]):
        self.src = src
        self.dst = dst
        self.partition = sorted(partition)
        preview = self.partition[:16]
        more = "" if len(self.partition) <= 16 else f" (+{len(self.partition) - 16} more)"
        super().__init__(
            f"no usable route from {src} to {dst}; {src} is cut off in partition {preview}{more}"
        )


class CollectiveError(SimulationError):
    code = "collective"


class DeadlockError(SimulationError):
    code = "deadlock"

    def __init__(self, waiting: List[str], cycle: Optional[List[int]] = None):
        self.waiting = waiting
        self.cycle = cycle
        detail = f"wait-for cycle between ranks {cycle}" if cycle else "no matching peer"
        shown = "; ".join(waiting[:8])
        super().__init__(f"simulation stalled ({detail}): {shown}")

