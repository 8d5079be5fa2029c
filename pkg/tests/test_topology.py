import itertools

import networkx as nx
import numpy as np
import pytest

from rapidsim.errors import FaultSpecError, RoutingError
from rapidsim.schema.specs import FaultGenerator, FaultSpec, LinkFault
from rapidsim.specs import resolve_topology_preset
from rapidsim.topology import LinkState, apply_faults, build_network, fault_summary, route
from tests.conftest import dim, topology


def _grid_edges(radices, wrap, diagonal=False):
    """Brute-force neighbour set over mixed-radix coordinates."""
    strides = [int(np.prod(radices[:d])) for d in range(len(radices))]
    rank = lambda c: sum(x * s for x, s in zip(c, strides))  # noqa: E731
    edges = set()
    for c in itertools.product(*[range(n) for n in reversed(radices)]):
        c = tuple(reversed(c))
        for d, n in enumerate(radices):
            for step in (1, -1):
                other = list(c)
                other[d] += step
                if wrap[d]:
                    other[d] %= n
                elif not 0 <= other[d] < n:
                    continue
                if tuple(other) != c:
                    edges.add(frozenset((rank(c), rank(other))))
        if diagonal:
            for dx, dy in itertools.product((1, -1), repeat=2):
                x, y = c[0] + dx, c[1] + dy
                if 0 <= x < radices[0] and 0 <= y < radices[1]:
                    edges.add(frozenset((rank(c), rank((x, y)))))
    return edges


@pytest.mark.parametrize("preset,counts,wrap,diagonal", [
    ("Ring", [6], [True], False),
    ("Ring", [2], [True], False),
    ("Mesh1D", [5], [False], False),
    ("Torus2D", [4, 4], [True, True], False),
    ("Torus2D", [4, 3], [True, True], False),
    ("Mesh2D", [3, 4], [False, False], False),
    ("Torus3D", [2, 3, 4], [True, True, True], False),
    ("KingMesh2D", [3, 3], [False, False], True),
    ("HyperCube", [16], [True] * 4, False),
])
def test_link_set_matches_brute_force(preset, counts, wrap, diagonal):
    spec = resolve_topology_preset(preset, counts, {"link_bw": 1e9})
    net = build_network(spec)
    radices = [d.node_count for d in spec.dims]
    assert {frozenset(link.key) for link in net.links} == _grid_edges(radices, wrap, diagonal)


def test_fully_connected_and_switch_counts():
    fc = build_network(topology(dim("FullyConnected", 5)))
    assert len(fc.links) == 10
    sw = build_network(topology(dim("Switch", 4), dim("Ring", 3)))
    # one switch per dim-0 line
    assert sw.num_nodes == 12 + 3
    assert len(sw.links) == 12 + 4 * 3


def test_coordinates_round_trip():
    net = build_network(topology(dim("Ring", 4), dim("Mesh1D", 3)))
    for r in range(net.num_ranks):
        assert net.rank_of(net.coords(r)) == r
    assert net.coords(5) == (1, 1)


def test_dimension_order_route_on_torus():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": 1e9, "link_latency": 1e-6}))
    r = route(net, 0, 5)
    # x first, then y
    assert r.nodes == (0, 1, 5)
    assert r.latency == pytest.approx(2e-6)
    # wrap-around is shorter
    assert route(net, 0, 3).nodes == (0, 3)


def test_switch_route_goes_through_switch():
    net = build_network(topology(dim("Switch", 4)))
    r = route(net, 0, 3)
    assert len(r) == 2
    assert net.is_switch(r.nodes[1])


def test_king_mesh_takes_diagonals():
    net = build_network(resolve_topology_preset("KingMesh2D", [3, 3], {"link_bw": 1e9}))
    assert len(route(net, 0, 8)) == 2


def _single_dead_link_cases(preset, counts):
    net = build_network(resolve_topology_preset(preset, counts, {"link_bw": 1e9}))
    for link in net.links:
        fault = LinkFault(endpoint_a=link.a, endpoint_b=link.b, kind="hard")
        yield net, apply_faults(net, FaultSpec(faults=(fault,)))


@pytest.mark.parametrize("preset,counts", [("Torus2D", [4, 4]), ("Mesh2D", [3, 3]), ("Ring", [5])])
def test_detours_are_shortest_on_residual(preset, counts):
    for net, faulty in _single_dead_link_cases(preset, counts):
        residual = faulty.residual_graph()
        for src, dst in itertools.permutations(range(faulty.num_ranks), 2):
            r = faulty.route(src, dst)
            assert all(link.usable for link in r.links)
            assert len(r) == nx.shortest_path_length(residual, src, dst)
            # a dead link never shortens a route
            assert len(r) >= len(net.route(src, dst))


@pytest.mark.parametrize("preset,counts", [
    ("Ring", [7]),
    ("Mesh1D", [6]),
    ("Torus2D", [4, 4]),
    ("Torus2D", [5, 3]),
    ("Mesh2D", [3, 4]),
    ("Torus3D", [4, 4, 4]),
    ("KingMesh2D", [4, 3]),
    ("HyperCube", [16]),
    ("Switch", [6]),
])
def test_fault_free_routes_are_shortest(preset, counts):
    net = build_network(resolve_topology_preset(preset, counts, {"link_bw": 1e9}))
    lengths = dict(nx.all_pairs_shortest_path_length(net.residual_graph()))
    for src, dst in itertools.permutations(range(net.num_ranks), 2):
        r = route(net, src, dst)
        assert r.nodes[0] == src and r.nodes[-1] == dst
        assert len(r) == lengths[src][dst]


def test_partition_raises_routing_error():
    net = build_network(topology(dim("Mesh1D", 4)))
    faulty = apply_faults(net, FaultSpec(faults=(LinkFault(endpoint_a=1, endpoint_b=2, kind="hard"),)))
    with pytest.raises(RoutingError):
        faulty.route(0, 3)
    assert len(faulty.route(0, 1)) == 1


def test_soft_fault_derates_and_keeps_nominal():
    net = build_network(topology(dim("Ring", 4, bw=100e9, latency=1e-6)))
    fault = LinkFault(endpoint_a=0, endpoint_b=1, derate=0.25, latency_factor=2.0)
    faulty = apply_faults(net, FaultSpec(faults=(fault,)))
    link = faulty.link(0, 1)
    assert link.state == LinkState.SOFT_FAULTY
    assert link.effective_bw == pytest.approx(25e9)
    assert link.nominal_bw == pytest.approx(100e9)
    assert link.latency == pytest.approx(2e-6)
    # the original network is untouched
    assert net.link(0, 1).state == LinkState.HEALTHY
    assert [lk.key for lk in fault_summary(faulty)] == [(0, 1)]


def test_fault_on_missing_link():
    net = build_network(topology(dim("Mesh1D", 4)))
    with pytest.raises(FaultSpecError):
        apply_faults(net, FaultSpec(faults=(LinkFault(endpoint_a=0, endpoint_b=3, derate=0.5),)))


def test_generator_is_seeded_and_clamped():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": 1e9}))
    gen = FaultGenerator(count=3, derate_mean=0.5, derate_std=2.0, derate_clamp=(0.2, 0.6), rng_seed=11)
    a = apply_faults(net, FaultSpec(generator=gen))
    b = apply_faults(net, FaultSpec(generator=gen))
    assert [lk for lk in fault_summary(a)] == [lk for lk in fault_summary(b)]
    faulty = fault_summary(a)
    assert len(faulty) == 3
    for link in faulty:
        assert 0.2 - 1e-12 <= link.effective_bw / link.nominal_bw <= 0.6 + 1e-12


def test_generator_respects_dimension_filter():
    net = build_network(resolve_topology_preset("Torus2D", [4, 4], {"link_bw": 1e9}))
    gen = FaultGenerator(count=4, dims=(1,), rng_seed=3)
    assert all(link.dim == 1 for link in fault_summary(apply_faults(net, FaultSpec(generator=gen))))


def test_generator_wants_too_many_links():
    net = build_network(topology(dim("Ring", 3)))
    with pytest.raises(FaultSpecError):
        apply_faults(net, FaultSpec(generator=FaultGenerator(count=4)))
