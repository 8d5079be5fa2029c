"""Link-level N-dimensional networks, dimension-order routing and fault overlays."""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from rapidsim.errors import FaultSpecError, RoutingError, SpecValidationError
from rapidsim.schema.specs import BaseTopology, FaultKind, FaultSpec, TopologySpec

logger = logging.getLogger(__name__)


class LinkState(str, Enum):
    HEALTHY = "healthy"
    SOFT_FAULTY = "soft_faulty"
    DEAD = "dead"


@dataclass(frozen=True)
class Link:
    """Undirected, full-duplex link. `a < b`; each direction has `effective_bw`."""
    a: int
    b: int
    dim: int
    nominal_bw: float
    effective_bw: float
    latency: float
    state: LinkState = LinkState.HEALTHY

    @property
    def key(self) -> Tuple[int, int]:
        return (self.a, self.b)

    @property
    def usable(self) -> bool:
        return self.state != LinkState.DEAD


@dataclass(frozen=True)
class Route:
    """Node sequence from src to dst and the links between consecutive nodes."""
    nodes: Tuple[int, ...]
    links: Tuple[Link, ...]

    @property
    def src(self) -> int:
        return self.nodes[0]

    @property
    def dst(self) -> int:
        return self.nodes[-1]

    @property
    def hops(self) -> Tuple[Tuple[int, int], ...]:
        """Directed hops, used for per-direction capacity."""
        return tuple(zip(self.nodes[:-1], self.nodes[1:]))

    @property
    def latency(self) -> float:
        return sum(link.latency for link in self.links)

    def __len__(self) -> int:
        return len(self.links)


def _key(u: int, v: int) -> Tuple[int, int]:
    return (u, v) if u < v else (v, u)


class Network:
    """Explicit instantiation of a TopologySpec. Immutable; faults produce a new Network."""

    def __init__(
        self,
        spec: TopologySpec,
        links: Dict[Tuple[int, int], Link],
        switch_lines: Dict[Tuple[int, int], int],
        num_nodes: int,
    ):
        self.spec = spec
        self.dims = spec.dims
        self.radices = tuple(d.node_count for d in spec.dims)
        self.num_ranks = spec.num_ranks
        self.num_nodes = num_nodes
        self.strides = tuple(math.prod(self.radices[:d]) for d in range(len(self.radices)))
        self._links = links
        # (dim, line base rank) -> switch node id
        self._switch_lines = switch_lines
        self._route_cache: Dict[Tuple[int, int], Route] = {}
        self._residual: Optional[nx.Graph] = None
        self._adjacency: Dict[int, List[int]] = {}
        for a, b in sorted(links):
            self._adjacency.setdefault(a, []).append(b)
            self._adjacency.setdefault(b, []).append(a)
        for nbrs in self._adjacency.values():
            nbrs.sort()

    # Coordinates

    def coords(self, rank: int) -> Tuple[int, ...]:
        """Mixed-radix coordinates, dimension 0 varies fastest."""
        if not (0 <= rank < self.num_ranks):
            raise SpecValidationError("rank range", f"rank {rank} outside 0..{self.num_ranks - 1}")
        return tuple((rank // s) % n for s, n in zip(self.strides, self.radices))

    def rank_of(self, coords: Sequence[int]) -> int:
        return sum(c * s for c, s in zip(coords, self.strides))

    def line_base(self, rank: int, dim: int) -> int:
        """Rank with coordinate 0 along `dim` and the same other coordinates."""
        return rank - self.coords(rank)[dim] * self.strides[dim]

    def line(self, rank: int, dim: int) -> List[int]:
        base = self.line_base(rank, dim)
        return [base + i * self.strides[dim] for i in range(self.radices[dim])]

    def is_switch(self, node: int) -> bool:
        return node >= self.num_ranks

    # Links

    @property
    def links(self) -> List[Link]:
        return [self._links[k] for k in sorted(self._links)]

    def link(self, u: int, v: int) -> Optional[Link]:
        return self._links.get(_key(u, v))

    def neighbors(self, node: int) -> List[int]:
        return self._adjacency.get(node, [])

    def residual_graph(self) -> nx.Graph:
        """Graph of usable (healthy or soft-faulty) links."""
        if self._residual is None:
            g = nx.Graph()
            g.add_nodes_from(range(self.num_nodes))
            g.add_edges_from(k for k, link in self._links.items() if link.usable)
            self._residual = g
        return self._residual

    def with_links(self, updates: Iterable[Link]) -> "Network":
        links = dict(self._links)
        for link in updates:
            links[link.key] = link
        return Network(self.spec, links, self._switch_lines, self.num_nodes)

    # Routing

    def route(self, src: int, dst: int) -> Route:
        key = (src, dst)
        cached = self._route_cache.get(key)
        if cached is None:
            cached = _route(self, src, dst)
            self._route_cache[key] = cached
        return cached

    def _make_route(self, nodes: Sequence[int]) -> Route:
        return Route(tuple(nodes), tuple(self._links[_key(u, v)] for u, v in zip(nodes[:-1], nodes[1:])))


def build_network(spec: TopologySpec) -> Network:
    """Instantiate every link of every dimension of `spec`."""
    radices = [d.node_count for d in spec.dims]
    num_ranks = math.prod(radices)
    strides = [math.prod(radices[:d]) for d in range(len(radices))]
    links: Dict[Tuple[int, int], Link] = {}
    switch_lines: Dict[Tuple[int, int], int] = {}
    next_node = num_ranks

    def add(u: int, v: int, dim: int, bw: float, latency: float) -> None:
        if u == v:
            return
        k = _key(u, v)
        if k not in links:
            links[k] = Link(k[0], k[1], dim, bw, bw, latency)

    for d, dim in enumerate(spec.dims):
        n, stride = dim.node_count, strides[d]
        for base in range(num_ranks):
            if (base // stride) % n:
                continue
            members = [base + i * stride for i in range(n)]
            if dim.base == BaseTopology.RING:
                for i in range(n):
                    add(members[i], members[(i + 1) % n], d, dim.link_bw, dim.link_latency)
            elif dim.base == BaseTopology.MESH1D:
                for i in range(n - 1):
                    add(members[i], members[i + 1], d, dim.link_bw, dim.link_latency)
            elif dim.base == BaseTopology.FULLY_CONNECTED:
                for i in range(n):
                    for j in range(i + 1, n):
                        add(members[i], members[j], d, dim.link_bw, dim.link_latency)
            elif dim.base == BaseTopology.SWITCH:
                switch = next_node
                next_node += 1
                switch_lines[(d, base)] = switch
                for m in members:
                    add(m, switch, d, dim.link_bw, dim.link_latency)

    if spec.diagonal_dims is not None:
        d0, d1 = spec.diagonal_dims
        n0, n1 = radices[d0], radices[d1]
        s0, s1 = strides[d0], strides[d1]
        # diagonal links are tagged with a dimension index past the real ones
        diag_dim = len(spec.dims)
        dim = spec.dims[d0]
        for r in range(num_ranks):
            c0, c1 = (r // s0) % n0, (r // s1) % n1
            if c0 + 1 < n0 and c1 + 1 < n1:
                add(r, r + s0 + s1, diag_dim, dim.link_bw, dim.link_latency)
            if c0 + 1 < n0 and c1 >= 1:
                add(r, r + s0 - s1, diag_dim, dim.link_bw, dim.link_latency)

    net = Network(spec, links, switch_lines, next_node)
    logger.debug(f"[build_network] {spec.name or 'custom'}: {num_ranks} ranks, {len(links)} links")
    return net


# Routing

def _dimension_order_path(net: Network, src: int, dst: int) -> List[Tuple[int, List[int]]]:
    """Fault-free dimension-order path as (dimension, node segment) pieces."""
    cur = list(net.coords(src))
    target = net.coords(dst)
    pieces: List[Tuple[int, List[int]]] = []

    diagonal = net.spec.diagonal_dims
    if diagonal is not None:
        d0, d1 = diagonal
        seg = [net.rank_of(cur)]
        while cur[d0] != target[d0] and cur[d1] != target[d1]:
            cur[d0] += 1 if target[d0] > cur[d0] else -1
            cur[d1] += 1 if target[d1] > cur[d1] else -1
            seg.append(net.rank_of(cur))
        if len(seg) > 1:
            pieces.append((len(net.dims), seg))

    for d, dim in enumerate(net.dims):
        if cur[d] == target[d]:
            continue
        here = net.rank_of(cur)
        n = dim.node_count
        if dim.base in (BaseTopology.FULLY_CONNECTED,):
            cur[d] = target[d]
            pieces.append((d, [here, net.rank_of(cur)]))
            continue
        if dim.base == BaseTopology.SWITCH:
            switch = net._switch_lines[(d, net.line_base(here, d))]
            cur[d] = target[d]
            pieces.append((d, [here, switch, net.rank_of(cur)]))
            continue
        if dim.base == BaseTopology.RING:
            fwd = (target[d] - cur[d]) % n
            back = n - fwd
            if fwd < back:
                step = 1
            elif back < fwd:
                step = -1
            else:
                # equal distance: lowest next-hop rank
                up = list(cur)
                up[d] = (cur[d] + 1) % n
                down = list(cur)
                down[d] = (cur[d] - 1) % n
                step = 1 if net.rank_of(up) < net.rank_of(down) else -1
        else:
            step = 1 if target[d] > cur[d] else -1
        seg = [here]
        while cur[d] != target[d]:
            cur[d] = (cur[d] + step) % n
            seg.append(net.rank_of(cur))
        pieces.append((d, seg))
    return pieces


def _bfs_path(graph: nx.Graph, src: int, dst: int) -> Optional[List[int]]:
    """Shortest path choosing the lowest next-hop node at every step."""
    if src not in graph or dst not in graph:
        return None
    dist = nx.single_source_shortest_path_length(graph, dst)
    if src not in dist:
        return None
    path = [src]
    node = src
    while node != dst:
        node = min(v for v in graph.neighbors(node) if dist.get(v) == dist[node] - 1)
        path.append(node)
    return path


def _line_nodes(net: Network, dim: int, rank: int) -> Set[int]:
    if dim >= len(net.dims):
        return set()
    nodes = set(net.line(rank, dim))
    switch = net._switch_lines.get((dim, net.line_base(rank, dim)))
    if switch is not None:
        nodes.add(switch)
    return nodes


def _route(net: Network, src: int, dst: int) -> Route:
    if src == dst:
        return Route((src,), ())
    pieces = _dimension_order_path(net, src, dst)
    path = [src]
    for _, seg in pieces:
        path.extend(seg[1:])
    if all(net.link(u, v).usable for u, v in zip(path[:-1], path[1:])):
        return net._make_route(path)

    residual = net.residual_graph()
    if not nx.has_path(residual, src, dst):
        raise RoutingError(src, dst, nx.node_connected_component(residual, src))
    shortest = nx.shortest_path_length(residual, src, dst)

    # repair broken segments inside their own dimension first
    repaired = [src]
    ok = True
    for d, seg in pieces:
        broken = any(not net.link(u, v).usable for u, v in zip(seg[:-1], seg[1:]))
        if not broken:
            repaired.extend(seg[1:])
            continue
        sub = residual.subgraph(_line_nodes(net, d, seg[0]))
        detour = _bfs_path(sub, seg[0], seg[-1])
        if detour is None:
            ok = False
            break
        repaired.extend(detour[1:])
    if ok and len(repaired) - 1 == shortest and len(set(repaired)) == len(repaired):
        return net._make_route(repaired)

    return net._make_route(_bfs_path(residual, src, dst))


def route(net: Network, src: int, dst: int) -> Route:
    """Dimension-order route, detouring around dead links when possible."""
    return net.route(src, dst)


# Faults

def apply_faults(
    net: Network,
    faults: FaultSpec,
    rng: Optional[np.random.Generator] = None,
) -> Network:
    """Return a new Network with explicit and sampled faults applied."""
    updates: Dict[Tuple[int, int], Link] = {}

    def current(u: int, v: int) -> Link:
        k = _key(u, v)
        if k in updates:
            return updates[k]
        link = net.link(u, v)
        if link is None:
            raise FaultSpecError(f"no physical link between {u} and {v}")
        return link

    for fault in faults.faults:
        link = current(fault.endpoint_a, fault.endpoint_b)
        if fault.kind == FaultKind.HARD:
            updates[link.key] = replace(link, effective_bw=0.0, state=LinkState.DEAD)
        else:
            updates[link.key] = replace(
                link,
                effective_bw=link.nominal_bw * fault.derate,
                latency=link.latency * fault.latency_factor,
                state=LinkState.SOFT_FAULTY,
            )

    gen = faults.generator
    if gen is not None:
        if rng is None:
            rng = np.random.default_rng(gen.rng_seed)
        pool = [
            link for link in net.links
            if link.usable and link.key not in updates and (gen.dims is None or link.dim in gen.dims)
        ]
        if gen.count > len(pool):
            raise FaultSpecError(f"generator wants {gen.count} faulty links, only {len(pool)} are eligible")
        picks = rng.choice(len(pool), size=gen.count, replace=False)
        lo, hi = gen.derate_clamp
        for idx in picks:
            link = pool[int(idx)]
            if gen.kind == FaultKind.HARD:
                updates[link.key] = replace(link, effective_bw=0.0, state=LinkState.DEAD)
                continue
            derate = float(np.clip(rng.normal(gen.derate_mean, gen.derate_std), lo, hi))
            updates[link.key] = replace(
                link, effective_bw=link.nominal_bw * derate, state=LinkState.SOFT_FAULTY
            )
        logger.info(f"[apply_faults] sampled {gen.count} {gen.kind.value} fault(s)")

    if not updates:
        return net
    return net.with_links(updates.values())


def fault_summary(net: Network) -> List[Link]:
    """Links that are not healthy, in key order."""
    return [link for link in net.links if link.state != LinkState.HEALTHY]
