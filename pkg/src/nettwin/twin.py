"""Graph-learning KPI predictors over network state.

Three model kinds share one interface:

* ``glance``: the full twin. T layers, each running (i) a GRU along every
  path over its links, with the link and transmitting-node embeddings as
  step input, (ii) a link MLP over the link, its transmitter and the summed
  intermediate path states that crossed it, and (iii) a symmetric-normalized
  graph convolution refreshing node embeddings from their outgoing links.
  K parallel MLP readouts map final path embeddings to per-flow KPIs. The
  subnet parameters are shared across the T layers.
* ``routenet``: ablation of ``glance`` with the node pathway removed (GRU
  input is the link embedding alone, the link MLP drops the node term, no
  graph convolution).
* ``gnn``: fixed-flow-count baseline. Node features hold the on/off means of
  the flows whose path crosses the node; three graph conv layers, mean pool,
  one dense head per KPI. Deliberately not equivariant to flow reordering.

Path models process flows in a canonical (source, destination) order
internally and restore the caller's order on output, which makes
flow-permutation equivariance exact at the bit level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    GRU_PARAM_KEYS,
    ParamSet,
    Tape,
    Tensor,
    glorot_uniform,
    gru_cell,
)
from .nettopo import Graph
from .routing import RoutingTable
from .seeding import make_rng
from .simulator import TASKS, TrafficParams

#: capacities are divided by this before entering link embeddings
CAPACITY_SCALE = 1e6

MODEL_KINDS = ("glance", "routenet", "gnn")


class TwinError(ValueError):
    """Raised for inconsistent model configuration or inputs."""


@dataclass(frozen=True)
class GlanceDims:
    """Architecture of the path models (glance and routenet).

    The readout default keeps the compact configuration's total parameter
    count in the expected 3e4..6e4 band.
    """

    d_node: int = 16
    d_link: int = 16
    d_path: int = 32
    t_layers: int = 3
    l_max: int = 3
    link_hidden: tuple[int, ...] = (64, 32, 16)
    readout_hidden: tuple[int, ...] = (64, 64, 32)

    def __post_init__(self) -> None:
        object.__setattr__(self, "link_hidden", tuple(self.link_hidden))
        object.__setattr__(self, "readout_hidden", tuple(self.readout_hidden))
        if self.d_path < 2:
            raise TwinError("d_path must be >= 2 (holds the on/off means)")
        if self.d_node < 1 or self.d_link < 1:
            raise TwinError("d_node and d_link must be >= 1")
        if self.t_layers < 1 or self.l_max < 1:
            raise TwinError("t_layers and l_max must be >= 1")
        if not self.link_hidden or not self.readout_hidden:
            raise TwinError("hidden size lists must be non-empty")


COMPACT = GlanceDims()
LARGE = GlanceDims(
    d_node=32, d_link=32, d_path=64, readout_hidden=(128, 128, 32)
)


@dataclass(frozen=True)
class GnnDims:
    """Architecture of the fixed-flow-count baseline."""

    n_flows: int
    channels: int = 96
    n_layers: int = 3

    def __post_init__(self) -> None:
        if self.n_flows < 1 or self.channels < 1 or self.n_layers < 1:
            raise TwinError("GnnDims fields must be positive")


def sym_normalized_operator(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with degrees of the self-looped adjacency."""
    a_hat = adjacency + np.eye(adjacency.shape[0])
    deg = 0.5 * (a_hat.sum(axis=1) + a_hat.sum(axis=0))
    inv_sqrt = 1.0 / np.sqrt(deg)
    return inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]


class TwinInput:
    """Preprocessed network state shared by all model forwards.

    Index arrays are laid out in the canonical flow order; ``order`` maps
    canonical position -> original flow index and ``inv_order`` restores the
    caller's order. The GNN feature matrix keeps the original flow order on
    purpose (the baseline is order-sensitive by design).
    """

    def __init__(
        self,
        graph: Graph,
        table: RoutingTable,
        traffic: TrafficParams,
        capacities: np.ndarray,
        l_max: int,
    ):
        n_flows = len(table.paths)
        if len(traffic) != n_flows:
            raise TwinError(
                f"traffic for {len(traffic)} flows, table has {n_flows} paths"
            )
        caps = np.asarray(capacities, dtype=np.float64)
        if caps.shape != (len(graph.links),):
            raise TwinError(
                f"capacities shape {caps.shape} must match {len(graph.links)} links"
            )
        for path in table.paths:
            if len(path.links) > l_max:
                raise TwinError(
                    f"flow {path.flow_index} has {len(path.links)} links, "
                    f"exceeding l_max={l_max}"
                )

        self.n_flows = n_flows
        self.n_nodes = graph.n_nodes
        self.n_links = len(graph.links)
        self.l_max = l_max
        self.tau_feat = np.stack([traffic.tau_on, traffic.tau_off], axis=1)
        self.caps_scaled = caps / CAPACITY_SCALE
        self.degrees = 0.5 * (graph.adjacency.sum(1) + graph.adjacency.sum(0))
        self.s_norm = sym_normalized_operator(graph.adjacency)
        self.link_tails = np.array([i for i, _ in graph.links], dtype=np.int64)

        pairs = [(p.source, p.destination) for p in table.paths]
        order = sorted(range(n_flows), key=lambda f: pairs[f])
        self.order = np.array(order, dtype=np.int64)
        self.inv_order = np.argsort(self.order)

        self.max_steps = max(len(p.links) for p in table.paths)
        s_count = self.max_steps
        self.link_ids = np.full((n_flows, s_count), self.n_links, dtype=np.int64)
        self.tail_ids = np.zeros((n_flows, s_count), dtype=np.int64)
        self.step_mask = np.zeros((n_flows, s_count))
        for c, f in enumerate(order):
            for s, (i, j) in enumerate(table.paths[f].links):
                r = graph.link_index.get((i, j))
                if r is None:
                    raise TwinError(f"flow {f} uses link ({i},{j}) not in the graph")
                self.link_ids[c, s] = r
                self.tail_ids[c, s] = i
                self.step_mask[c, s] = 1.0
        # step-major segment ids over the stacked (S*F, d_path) m states;
        # padded slots land in the dummy segment n_links
        self.seg_ids = self.link_ids.T.reshape(-1).copy()

        self.gnn_features_mask = np.zeros((graph.n_nodes, 2 * n_flows))
        for f, path in enumerate(table.paths):
            for node in path.nodes:
                self.gnn_features_mask[node, 2 * f] = 1.0
                self.gnn_features_mask[node, 2 * f + 1] = 1.0

    @property
    def gnn_features(self) -> np.ndarray:
        flat = np.empty(2 * self.n_flows)
        flat[0::2] = self.tau_feat[:, 0]
        flat[1::2] = self.tau_feat[:, 1]
        return self.gnn_features_mask * flat[None, :]


def prepare_twin_input(
    graph: Graph,
    table: RoutingTable,
    traffic: TrafficParams,
    capacities: np.ndarray,
    l_max: int,
) -> TwinInput:
    return TwinInput(graph, table, traffic, capacities, l_max)


# -- parameter construction -------------------------------------------------


def _add_mlp(
    params: ParamSet,
    rng: np.random.Generator,
    prefix: str,
    sizes: list[int],
    final: tuple[str, int] | None,
) -> None:
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        params.add(f"{prefix}/w{i}", glorot_uniform(rng, a, b))
        params.add(f"{prefix}/b{i}", np.zeros(b))
    if final is not None:
        name, out = final
        params.add(f"{prefix}/{name}_w", glorot_uniform(rng, sizes[-1], out))
        params.add(f"{prefix}/{name}_b", np.zeros(out))


def init_glance_params(
    dims: GlanceDims, tasks: tuple[str, ...], seed: int
) -> ParamSet:
    rng = make_rng(seed, "glance-init")
    params = ParamSet()
    d_in = dims.d_link + dims.d_node
    for gate in ("z", "r", "h"):
        params.add(f"gru/w_{gate}", glorot_uniform(rng, d_in, dims.d_path))
        params.add(f"gru/u_{gate}", glorot_uniform(rng, dims.d_path, dims.d_path))
        params.add(f"gru/b_{gate}", np.zeros(dims.d_path))
    link_in = dims.d_link + dims.d_node + dims.d_path
    _add_mlp(
        params, rng, "link", [link_in, *dims.link_hidden], ("proj", dims.d_link)
    )
    params.add("egc/w", glorot_uniform(rng, dims.d_node + dims.d_link, dims.d_node))
    for task in tasks:
        _add_mlp(
            params, rng, f"readout/{task}", [dims.d_path, *dims.readout_hidden], ("out", 1)
        )
    return params


def init_routenet_params(
    dims: GlanceDims, tasks: tuple[str, ...], seed: int
) -> ParamSet:
    rng = make_rng(seed, "routenet-init")
    params = ParamSet()
    for gate in ("z", "r", "h"):
        params.add(f"gru/w_{gate}", glorot_uniform(rng, dims.d_link, dims.d_path))
        params.add(f"gru/u_{gate}", glorot_uniform(rng, dims.d_path, dims.d_path))
        params.add(f"gru/b_{gate}", np.zeros(dims.d_path))
    _add_mlp(
        params,
        rng,
        "link",
        [dims.d_link + dims.d_path, *dims.link_hidden],
        ("proj", dims.d_link),
    )
    for task in tasks:
        _add_mlp(
            params, rng, f"readout/{task}", [dims.d_path, *dims.readout_hidden], ("out", 1)
        )
    return params


def init_gnn_params(dims: GnnDims, tasks: tuple[str, ...], seed: int) -> ParamSet:
    rng = make_rng(seed, "gnn-init")
    params = ParamSet()
    widths = [2 * dims.n_flows] + [dims.channels] * dims.n_layers
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        params.add(f"gcn/w{i}", glorot_uniform(rng, a, b))
        params.add(f"gcn/b{i}", np.zeros(b))
    for task in tasks:
        params.add(f"readout/{task}/w", glorot_uniform(rng, dims.channels, dims.n_flows))
        params.add(f"readout/{task}/b", np.zeros(dims.n_flows))
    return params


# -- forward passes ----------------------------------------------------------


def _run_mlp(
    tape: Tape,
    x: Tensor,
    bound: dict[str, Tensor],
    prefix: str,
    n_hidden: int,
    final: str,
) -> Tensor:
    for i in range(n_hidden):
        x = tape.relu(
            tape.add(tape.matmul(x, bound[f"{prefix}/w{i}"]), bound[f"{prefix}/b{i}"])
        )
    return tape.add(
        tape.matmul(x, bound[f"{prefix}/{final}_w"]), bound[f"{prefix}/{final}_b"]
    )


def _readouts(
    tape: Tape,
    h_paths: Tensor,
    bound: dict[str, Tensor],
    dims: GlanceDims,
    tasks: tuple[str, ...],
) -> Tensor:
    cols = [
        _run_mlp(tape, h_paths, bound, f"readout/{task}", len(dims.readout_hidden), "out")
        for task in tasks
    ]
    return tape.concat(cols, 1)


def init_embeddings(
    tape: Tape,
    inp: TwinInput,
    dims: GlanceDims,
    tau: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Initial (path, link, node) embeddings: features then zero padding.

    Paths start from [tau_on, tau_off], links from the scaled capacity,
    nodes from the weighted degree. ``tau`` optionally supplies a
    differentiable (F, 2) tensor in the caller's flow order.
    """
    n_f, n_l = inp.n_flows, inp.n_links
    if tau is None:
        tau_can = tape.constant(inp.tau_feat[inp.order])
    else:
        if tau.value.shape != (n_f, 2):
            raise TwinError(f"tau override must be ({n_f}, 2), got {tau.value.shape}")
        tau_can = tape.gather(tau, inp.order)
    h_p = tape.concat(
        [tau_can, tape.constant(np.zeros((n_f, dims.d_path - 2)))], 1
    )
    h_l = tape.concat(
        [
            tape.constant(inp.caps_scaled[:, None]),
            tape.constant(np.zeros((n_l, dims.d_link - 1))),
        ],
        1,
    )
    h_n = tape.concat(
        [
            tape.constant(inp.degrees[:, None]),
            tape.constant(np.zeros((inp.n_nodes, dims.d_node - 1))),
        ],
        1,
    )
    return h_p, h_l, h_n


def _step_masks(tape: Tape, inp: TwinInput, width: int) -> list[Tensor]:
    return [
        tape.constant(np.repeat(inp.step_mask[:, s : s + 1], width, axis=1))
        for s in range(inp.max_steps)
    ]


def glance_forward(
    tape: Tape,
    bound: dict[str, Tensor],
    inp: TwinInput,
    dims: GlanceDims,
    tasks: tuple[str, ...],
    tau: Tensor | None = None,
) -> Tensor:
    """Full twin forward; returns (F, len(tasks)) in the caller's flow order."""
    gru = {key: bound[f"gru/{key}"] for key in GRU_PARAM_KEYS}
    h_p, h_l, h_n = init_embeddings(tape, inp, dims, tau)
    masks = _step_masks(tape, inp, dims.d_path)
    zero_row = tape.constant(np.zeros((1, dims.d_link)))
    link_range = np.arange(inp.n_links)
    for _ in range(dims.t_layers):
        h_l_ext = tape.concat([h_l, zero_row], 0)
        h = h_p
        m_parts = []
        for s in range(inp.max_steps):
            x = tape.concat(
                [
                    tape.gather(h_l_ext, inp.link_ids[:, s]),
                    tape.gather(h_n, inp.tail_ids[:, s]),
                ],
                1,
            )
            h_new = gru_cell(tape, x, h, gru)
            # paths shorter than s keep their state; padded slots stay zero
            h = tape.add(h, tape.mul(masks[s], tape.sub(h_new, h)))
            m_parts.append(tape.mul(h, masks[s]))
        h_p = h
        m_stack = tape.concat(m_parts, 0)
        seg = tape.segment_sum(m_stack, inp.seg_ids, inp.n_links + 1)
        link_sums = tape.gather(seg, link_range)
        x = tape.concat(
            [h_l, tape.gather(h_n, inp.link_tails), link_sums], 1
        )
        h_l = _run_mlp(tape, x, bound, "link", len(dims.link_hidden), "proj")
        out_sums = tape.segment_sum(h_l, inp.link_tails, inp.n_nodes)
        h_n = tape.relu(
            tape.matmul(
                tape.constant(inp.s_norm),
                tape.matmul(tape.concat([h_n, out_sums], 1), bound["egc/w"]),
            )
        )
    preds = _readouts(tape, h_p, bound, dims, tasks)
    return tape.gather(preds, inp.inv_order)


def routenet_forward(
    tape: Tape,
    bound: dict[str, Tensor],
    inp: TwinInput,
    dims: GlanceDims,
    tasks: tuple[str, ...],
    tau: Tensor | None = None,
) -> Tensor:
    """Node-blind ablation; returns (F, len(tasks)) in the caller's order."""
    gru = {key: bound[f"gru/{key}"] for key in GRU_PARAM_KEYS}
    h_p, h_l, _ = init_embeddings(tape, inp, dims, tau)
    masks = _step_masks(tape, inp, dims.d_path)
    zero_row = tape.constant(np.zeros((1, dims.d_link)))
    link_range = np.arange(inp.n_links)
    for _ in range(dims.t_layers):
        h_l_ext = tape.concat([h_l, zero_row], 0)
        h = h_p
        m_parts = []
        for s in range(inp.max_steps):
            x = tape.gather(h_l_ext, inp.link_ids[:, s])
            h_new = gru_cell(tape, x, h, gru)
            h = tape.add(h, tape.mul(masks[s], tape.sub(h_new, h)))
            m_parts.append(tape.mul(h, masks[s]))
        h_p = h
        m_stack = tape.concat(m_parts, 0)
        seg = tape.segment_sum(m_stack, inp.seg_ids, inp.n_links + 1)
        link_sums = tape.gather(seg, link_range)
        h_l = _run_mlp(
            tape,
            tape.concat([h_l, link_sums], 1),
            bound,
            "link",
            len(dims.link_hidden),
            "proj",
        )
    preds = _readouts(tape, h_p, bound, dims, tasks)
    return tape.gather(preds, inp.inv_order)


def gnn_forward(
    tape: Tape,
    bound: dict[str, Tensor],
    inp: TwinInput,
    dims: GnnDims,
    tasks: tuple[str, ...],
) -> Tensor:
    """Fixed-F baseline; rejects inputs whose flow count differs from dims."""
    if inp.n_flows != dims.n_flows:
        raise TwinError(
            f"gnn built for {dims.n_flows} flows, input has {inp.n_flows}"
        )
    x = tape.constant(inp.gnn_features)
    s = tape.constant(inp.s_norm)
    for i in range(dims.n_layers):
        x = tape.relu(
            tape.add(
                tape.matmul(s, tape.matmul(x, bound[f"gcn/w{i}"])),
                bound[f"gcn/b{i}"],
            )
        )
    pool = tape.matmul(
        tape.constant(np.full((1, inp.n_nodes), 1.0 / inp.n_nodes)), x
    )
    cols = [
        tape.transpose(
            tape.add(
                tape.matmul(pool, bound[f"readout/{task}/w"]),
                bound[f"readout/{task}/b"],
            )
        )
        for task in tasks
    ]
    return tape.concat(cols, 1)


# -- model container ---------------------------------------------------------


@dataclass
class TwinModel:
    """A model kind, its task list, dims, and parameters."""

    kind: str
    tasks: tuple[str, ...]
    params: ParamSet
    dims: GlanceDims | GnnDims

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise TwinError(f"unknown model kind {self.kind!r}")
        self.tasks = tuple(self.tasks)
        bad = [t for t in self.tasks if t not in TASKS]
        if bad or not self.tasks:
            raise TwinError(f"invalid task list {self.tasks!r}")

    def forward(
        self,
        tape: Tape,
        bound: dict[str, Tensor],
        inp: TwinInput,
        tau: Tensor | None = None,
    ) -> Tensor:
        if self.kind == "glance":
            return glance_forward(tape, bound, inp, self.dims, self.tasks, tau)
        if self.kind == "routenet":
            return routenet_forward(tape, bound, inp, self.dims, self.tasks, tau)
        if tau is not None:
            raise TwinError("the gnn baseline does not take a tau override")
        return gnn_forward(tape, bound, inp, self.dims, self.tasks)

    def predict(self, inp: TwinInput) -> np.ndarray:
        """Inference convenience: fresh tape, constant-bound parameters."""
        tape = Tape()
        bound = {name: tape.constant(arr) for name, arr in self.params.items()}
        return self.forward(tape, bound, inp, None).value

    def param_count(self) -> int:
        return self.params.count()

    def embedding_names(self) -> list[str]:
        return [n for n in self.params.names() if not n.startswith("readout/")]

    def readout_names(self, task: str | None = None) -> list[str]:
        prefix = "readout/" if task is None else f"readout/{task}/"
        return [n for n in self.params.names() if n.startswith(prefix)]

    def l2_map(self, l2_link: float, l2_readout: float) -> dict[str, float]:
        """Per-parameter L2 coefficients: link subnet and readouts only."""
        out: dict[str, float] = {}
        for name in self.params.names():
            if name.startswith(("link/", "gcn/")):
                if l2_link:
                    out[name] = l2_link
            elif name.startswith("readout/") and l2_readout:
                out[name] = l2_readout
        return out


def make_model(
    kind: str,
    tasks: tuple[str, ...],
    seed: int,
    dims: GlanceDims | None = None,
    n_flows: int | None = None,
    gnn_dims: GnnDims | None = None,
) -> TwinModel:
    """Build a freshly initialized model of the requested kind."""
    tasks = tuple(tasks)
    if kind == "glance":
        d = dims or COMPACT
        return TwinModel(kind, tasks, init_glance_params(d, tasks, seed), d)
    if kind == "routenet":
        d = dims or COMPACT
        return TwinModel(kind, tasks, init_routenet_params(d, tasks, seed), d)
    if kind == "gnn":
        if gnn_dims is None:
            if n_flows is None:
                raise TwinError("gnn needs n_flows or gnn_dims")
            gnn_dims = GnnDims(n_flows=n_flows)
        return TwinModel(kind, tasks, init_gnn_params(gnn_dims, tasks, seed), gnn_dims)
    raise TwinError(f"unknown model kind {kind!r}")
