"""Independent oracles for the test suite.

Everything here is written from scratch against numpy only, so the checks
never reuse the code they are checking: central finite differences for
gradients, a from-scratch minimal-hop path enumerator working directly on
the adjacency matrix, and a random connected graph builder.
"""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-6


def fd_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f at x, perturbing in place.

    x is mutated entry by entry and restored bit-exactly, so f may close
    over the same buffer instead of receiving copies.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-3) -> float:
    """max |got - want| / max(|got|, |want|, floor).

    The floor turns the comparison absolute for near-zero entries, keeping
    finite-difference roundoff (~1e-10 at step 1e-6) from dominating.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    return float((np.abs(got - want) / denom).max())


def hop_distances(adjacency: np.ndarray, source: int) -> list[int]:
    """Plain-list BFS over A > 0; -1 marks unreachable nodes."""
    n = adjacency.shape[0]
    dist = [-1] * n
    dist[source] = 0
    frontier = [source]
    while frontier:
        nxt = []
        for u in frontier:
            for v in range(n):
                if adjacency[u][v] > 0 and dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def minimal_node_paths(
    adjacency: np.ndarray, source: int, dest: int
) -> set[tuple[int, ...]]:
    """All minimal-hop node sequences source -> dest, by depth-first walk."""
    dist = hop_distances(adjacency, source)
    if dist[dest] < 0:
        return set()
    n = adjacency.shape[0]
    out: set[tuple[int, ...]] = set()

    def walk(node: int, trail: tuple[int, ...]) -> None:
        if node == dest:
            out.add(trail)
            return
        for v in range(n):
            if adjacency[node][v] > 0 and dist[v] == dist[node] + 1:
                walk(v, trail + (v,))

    walk(source, (source,))
    return out


def random_connected_adjacency(rng: np.random.Generator, n_nodes: int) -> np.ndarray:
    """Random spanning tree plus extra edges; unit weights, symmetric."""
    a = np.zeros((n_nodes, n_nodes))
    order = rng.permutation(n_nodes)
    for k in range(1, n_nodes):
        i, j = order[k], order[rng.integers(k)]
        a[i, j] = a[j, i] = 1.0
    extra = rng.integers(0, n_nodes + 1)
    for _ in range(extra):
        i, j = rng.integers(n_nodes, size=2)
        if i != j:
            a[i, j] = a[j, i] = 1.0
    return a
