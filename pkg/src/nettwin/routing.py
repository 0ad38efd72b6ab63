"""Hop-count shortest-path routing with seeded uniform tie-breaking.

When several minimal-hop paths exist, one is chosen by walking back from the
destination and picking uniformly at random among equal-cost predecessors,
with a dedicated RNG stream per (seed, flow). An exhaustive enumerator over
small graphs serves as the correctness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nettopo import FlowSet, Graph, validate_flows
from .seeding import make_rng

#: node-count guard for exhaustive path enumeration
ENUMERATION_NODE_LIMIT = 12


class RoutingError(ValueError):
    """Raised when routing is impossible or a path is malformed."""


@dataclass(frozen=True)
class Path:
    """A simple path as the ordered directed links it traverses."""

    flow_index: int
    links: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        links = tuple((int(i), int(j)) for i, j in self.links)
        object.__setattr__(self, "links", links)
        if not links:
            raise RoutingError(f"flow {self.flow_index}: empty link sequence")
        for (a, b), (c, _) in zip(links, links[1:]):
            if b != c:
                raise RoutingError(
                    f"flow {self.flow_index}: links {(a, b)} and ({c}, ...) do not chain"
                )
        if len(set(self.nodes)) != len(self.nodes):
            raise RoutingError(f"flow {self.flow_index}: path revisits a node")

    @property
    def nodes(self) -> tuple[int, ...]:
        return (self.links[0][0],) + tuple(j for _, j in self.links)

    @property
    def source(self) -> int:
        return self.links[0][0]

    @property
    def destination(self) -> int:
        return self.links[-1][1]

    def __len__(self) -> int:
        return len(self.links)


@dataclass(frozen=True)
class RoutingTable:
    """One path per flow, plus the tie-break seed that produced them."""

    paths: tuple[Path, ...]
    seed: int


@dataclass(frozen=True)
class Violation:
    """A structured routing-table defect; validate_table never raises."""

    flow_index: int
    kind: str
    detail: str


def _bfs_distances(graph: Graph, source: int) -> np.ndarray:
    dist = np.full(graph.n_nodes, -1, dtype=np.int64)
    dist[source] = 0
    frontier = [source]
    while frontier:
        nxt: list[int] = []
        for u in frontier:
            for v in graph.neighbors[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def _route_one(
    graph: Graph, source: int, dest: int, rng: np.random.Generator, flow_index: int
) -> Path:
    dist = _bfs_distances(graph, source)
    if dist[dest] < 0:
        raise RoutingError(
            f"flow {flow_index}: destination {dest} unreachable from {source}"
        )
    nodes = [dest]
    current = dest
    while current != source:
        preds = [u for u in graph.neighbors[current] if dist[u] == dist[current] - 1]
        current = preds[int(rng.integers(len(preds)))]
        nodes.append(current)
    nodes.reverse()
    return Path(flow_index, tuple(zip(nodes, nodes[1:])))


def shortest_paths(graph: Graph, flows: FlowSet, seed: int) -> RoutingTable:
    """Minimal-hop path per flow; ties broken uniformly from the seed."""
    validate_flows(flows, graph)
    paths = []
    for f, (s, d) in enumerate(flows.pairs):
        rng = make_rng(seed, "routing", f)
        paths.append(_route_one(graph, s, d, rng, f))
    return RoutingTable(tuple(paths), seed)


def enumerate_shortest_paths(
    graph: Graph, source: int, dest: int
) -> tuple[tuple[tuple[int, int], ...], ...]:
    """All simple minimal-hop paths source -> dest, as link sequences.

    Exhaustive oracle, guarded to small graphs. Returns () when dest is
    unreachable. Paths come out in a deterministic lexicographic node order.
    """
    n = graph.n_nodes
    if n > ENUMERATION_NODE_LIMIT:
        raise RoutingError(
            f"exhaustive enumeration capped at {ENUMERATION_NODE_LIMIT} nodes, got {n}"
        )
    if not (0 <= source < n and 0 <= dest < n):
        raise RoutingError(f"endpoints ({source}, {dest}) out of range")
    if source == dest:
        raise RoutingError("source and destination coincide")
    dist = _bfs_distances(graph, source)
    if dist[dest] < 0:
        return ()
    suffixes: dict[int, list[tuple[int, ...]]] = {dest: [(dest,)]}

    def suffixes_from(v: int) -> list[tuple[int, ...]]:
        # node sequences v -> dest along strictly increasing BFS layers
        if v in suffixes:
            return suffixes[v]
        out: list[tuple[int, ...]] = []
        for w in graph.neighbors[v]:
            if dist[w] == dist[v] + 1 and dist[dest] - dist[w] >= 0:
                out.extend((v,) + tail for tail in suffixes_from(w))
        suffixes[v] = out
        return out

    paths = []
    for node_seq in sorted(suffixes_from(source)):
        if node_seq[-1] == dest:
            paths.append(tuple(zip(node_seq, node_seq[1:])))
    return tuple(paths)


def validate_table(
    table,
    graph: Graph,
    flows: FlowSet,
    l_max: int | None = None,
) -> list[Violation]:
    """Collect structural defects of a routing table; empty list means valid.

    Accepts a RoutingTable or a raw list of per-flow link sequences (as read
    from a dataset file), and never raises on malformed content.
    """
    if isinstance(table, RoutingTable):
        raw = [list(path.links) for path in table.paths]
    else:
        raw = [[(int(i), int(j)) for i, j in links] for links in table]
    violations: list[Violation] = []
    if len(raw) != len(flows):
        violations.append(
            Violation(
                -1,
                "count-mismatch",
                f"table has {len(raw)} paths for {len(flows)} flows",
            )
        )
    for f, links in enumerate(raw):
        if f >= len(flows):
            break
        s, d = flows.sources[f], flows.destinations[f]
        if not links:
            violations.append(Violation(f, "empty-path", "no links"))
            continue
        for (a, b), (c, _) in zip(links, links[1:]):
            if b != c:
                violations.append(
                    Violation(f, "broken-chain", f"link ({a},{b}) then ({c},...)")
                )
        if links[0][0] != s or links[-1][1] != d:
            violations.append(
                Violation(
                    f,
                    "endpoint-mismatch",
                    f"path runs {links[0][0]}->{links[-1][1]}, flow is {s}->{d}",
                )
            )
        nodes = (links[0][0],) + tuple(j for _, j in links)
        if len(set(nodes)) != len(nodes):
            violations.append(Violation(f, "not-simple", "path revisits a node"))
        for i, j in links:
            if not (0 <= i < graph.n_nodes and 0 <= j < graph.n_nodes) or (
                graph.adjacency[i, j] <= 0
            ):
                violations.append(
                    Violation(f, "missing-link", f"({i},{j}) not in the graph")
                )
        if l_max is not None and len(links) > l_max:
            violations.append(
                Violation(f, "path-too-long", f"{len(links)} links exceeds {l_max}")
            )
    return violations
