"""Shared fixtures: small graphs, a toy dataset, and a CLI runner."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nettwin.nettopo import FlowSet, Graph, build_reg_grid
from nettwin.pipeline import GenConfig, Sample, generate_dataset, load_dataset
from nettwin.routing import Path as RoutePath
from nettwin.routing import RoutingTable
from nettwin.simulator import TrafficParams, default_sim_config, link_capacities
from nettwin.twin import GlanceDims

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

#: small architecture shared by the fast model tests
TINY_DIMS = GlanceDims(
    d_node=4,
    d_link=4,
    d_path=8,
    t_layers=2,
    l_max=2,
    link_hidden=(8,),
    readout_hidden=(8,),
)


def wired_graph(n: int, edges: list[tuple[int, int]]) -> Graph:
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return Graph(a, None, wired=True)


@pytest.fixture(scope="session")
def line3() -> Graph:
    return wired_graph(3, [(0, 1), (1, 2)])


@pytest.fixture(scope="session")
def diamond4() -> Graph:
    # two shortest 0 -> 3 paths, via 1 or via 2
    return wired_graph(4, [(0, 1), (0, 2), (1, 3), (2, 3)])


@pytest.fixture(scope="session")
def cycle4() -> Graph:
    return wired_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])


@pytest.fixture(scope="session")
def reg44() -> Graph:
    return build_reg_grid()


def line_sample(
    graph: Graph,
    tau_on: float,
    tau_off: float,
    labels_row: list[float],
    index: int = 0,
) -> Sample:
    """Hand-built single-flow sample on the 0-1-2 line, labels (1, 4)."""
    flows = FlowSet((0,), (2,))
    table = RoutingTable((RoutePath(0, ((0, 1), (1, 2))),), seed=0)
    config = default_sim_config(wired=True)
    return Sample(
        index=index,
        split="train",
        graph_id="line",
        graph=graph,
        flows=flows,
        traffic=TrafficParams((tau_on,), (tau_off,)),
        table=table,
        capacities=link_capacities(graph, config),
        labels=np.array([labels_row], dtype=np.float64),
    )


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory) -> str:
    """Small reggrid-fixed dataset reused across pipeline and CLI tests."""
    out = tmp_path_factory.mktemp("data") / "toy"
    config = GenConfig(
        scenario="reggrid-fixed",
        n_train=8,
        n_val=2,
        n_test=2,
        n_r_test=4,
        t_gen=5.0,
        seed=5,
    )
    generate_dataset(config, out, jobs=2)
    return str(out)


@pytest.fixture(scope="session")
def toy_dataset(toy_dataset_dir):
    return load_dataset(toy_dataset_dir)


@pytest.fixture()
def run_cli():
    from nettwin.cli import main

    def run(*argv: str) -> int:
        return main(list(argv))

    return run
