"""Network management on top of a frozen twin.

Two solvers drive per-flow inputs toward a target KPI profile by querying a
trained model instead of the simulator: projected gradient descent over the
traffic means, and hill-climbing over flow destinations with random inits
and restarts. Both only ever accept strict improvements, so their objective
trajectories are non-increasing and identical seeds reproduce identical
results.

The evaluation protocol then checks a proposal against reality: the target
is a 3-run simulator average of the original input, the yardstick is a
second independent 3-run average of the same input, and the proposal gets
its own 3 fresh runs. Errors are IQR-normalized MAEs; the hinge metric
counts cells whose generated KPI lands on the wrong side of the target
(above for delay/jitter/drops, below for throughput; equality passes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DivergenceError, Tape
from .nettopo import FlowSet, Graph
from .routing import RoutingTable, shortest_paths
from .seeding import derive_seed, make_rng
from .simulator import (
    TASKS,
    SimConfig,
    TrafficParams,
    _quiet_nanmean,
    default_sim_config,
    link_capacities,
    run_sim,
)
from .twin import GlanceDims, TwinModel, prepare_twin_input

#: projection box for traffic means, matching the continuous training range
TRAFFIC_BOUNDS = (1.0, 20.0)

#: hinge direction: True means larger-than-target violates the bound
HINGE_UPPER = {"delay": True, "jitter": True, "throughput": False, "drops": True}


class ManageError(ValueError):
    """Raised for invalid management inputs or aborted optimizations."""


@dataclass(frozen=True)
class TargetProfile:
    """Target KPIs in normalized units plus the per-KPI objective mask.

    k_targ is (F, 4) in TASKS column order, already divided by iqr. NaN
    cells are allowed and simply drop out of the objective; the mask must
    leave at least one finite cell in play.
    """

    k_targ: np.ndarray
    task_mask: tuple[bool, ...]
    iqr: np.ndarray

    def __post_init__(self) -> None:
        k = np.asarray(self.k_targ, dtype=np.float64)
        iqr = np.asarray(self.iqr, dtype=np.float64)
        mask = tuple(bool(b) for b in self.task_mask)
        object.__setattr__(self, "k_targ", k)
        object.__setattr__(self, "iqr", iqr)
        object.__setattr__(self, "task_mask", mask)
        if k.ndim != 2 or k.shape[1] != len(TASKS):
            raise ManageError(f"k_targ must be (F, {len(TASKS)}), got {k.shape}")
        if len(mask) != len(TASKS) or not any(mask):
            raise ManageError("task_mask must enable at least one KPI")
        if iqr.shape != (len(TASKS),) or np.any(iqr <= 0):
            raise ManageError("iqr must be 4 positive scales")
        active = k[:, [i for i, b in enumerate(mask) if b]]
        if not np.any(np.isfinite(active)):
            raise ManageError("target profile has no finite cell under the mask")

    @property
    def n_flows(self) -> int:
        return self.k_targ.shape[0]

    @classmethod
    def from_raw(
        cls,
        raw_kpis: np.ndarray,
        iqr: np.ndarray,
        tasks: tuple[str, ...] = TASKS,
    ) -> "TargetProfile":
        """Build from raw-unit KPIs and the task names in the objective."""
        bad = [t for t in tasks if t not in TASKS]
        if bad:
            raise ManageError(f"unknown objective tasks {bad}")
        iqr = np.asarray(iqr, dtype=np.float64)
        mask = tuple(t in tasks for t in TASKS)
        return cls(np.asarray(raw_kpis, dtype=np.float64) / iqr, mask, iqr)


@dataclass
class ManageResult:
    """Solver output plus the simulator-protocol completion fields."""

    kind: str  # traffic | destinations
    optimized_traffic: np.ndarray | None
    optimized_destinations: tuple[int, ...] | None
    trajectory: list[float]
    iterations: int
    converged: bool
    seed: int | None = None
    restart_best: int | None = None
    k_targ: np.ndarray | None = None
    k_gen: np.ndarray | None = None
    k_bm: np.ndarray | None = None
    eps_gen: dict | None = None
    eps_bm: dict | None = None
    hinge_failures: dict | None = None
    r2: dict | None = None

    @property
    def objective(self) -> float:
        return self.trajectory[-1]

    def to_jsonable(self) -> dict:
        def arr(a):
            return None if a is None else [
                [None if math.isnan(x) else float(x) for x in row] for row in a
            ]

        return {
            "kind": self.kind,
            "optimized_traffic": None
            if self.optimized_traffic is None
            else [[float(x) for x in row] for row in self.optimized_traffic],
            "optimized_destinations": None
            if self.optimized_destinations is None
            else list(self.optimized_destinations),
            "trajectory": [float(j) for j in self.trajectory],
            "iterations": self.iterations,
            "converged": self.converged,
            "seed": self.seed,
            "restart_best": self.restart_best,
            "k_targ": arr(self.k_targ),
            "k_gen": arr(self.k_gen),
            "k_bm": arr(self.k_bm),
            "eps_gen": self.eps_gen,
            "eps_bm": self.eps_bm,
            "hinge_failures": self.hinge_failures,
            "r2": self.r2,
        }


# -- objective ---------------------------------------------------------------


def _objective_arrays(
    profile: TargetProfile, model: TwinModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Targets (gaps zeroed), weights, and 1/iqr columns in model-task order.

    sum(|pred * inv_iqr - targets| * weights) is then the mean normalized
    absolute error over all finite masked cells.
    """
    masked_tasks = [t for i, t in enumerate(TASKS) if profile.task_mask[i]]
    missing = [t for t in masked_tasks if t not in model.tasks]
    if missing:
        raise ManageError(
            f"objective needs tasks {missing} the model does not predict"
        )
    n_f = profile.n_flows
    n_cols = len(model.tasks)
    targets = np.zeros((n_f, n_cols))
    weights = np.zeros((n_f, n_cols))
    inv_iqr = np.zeros((n_f, n_cols))
    cells = []
    for col, t in enumerate(model.tasks):
        k = TASKS.index(t)
        inv_iqr[:, col] = 1.0 / profile.iqr[k]
        if not profile.task_mask[k]:
            continue
        finite = np.isfinite(profile.k_targ[:, k])
        targets[finite, col] = profile.k_targ[finite, k]
        cells.append((col, finite))
    n_valid = int(sum(f.sum() for _, f in cells))
    if n_valid == 0:
        raise ManageError("no finite target cell for the model's tasks")
    for col, finite in cells:
        weights[finite, col] = 1.0 / n_valid
    return targets, weights, inv_iqr


def twin_objective(
    model: TwinModel,
    inp,
    profile: TargetProfile,
    tau: np.ndarray | None = None,
) -> float:
    """Forward-only J: masked mean |normalized prediction - target|."""
    targets, weights, inv_iqr = _objective_arrays(profile, model)
    tape = Tape()
    bound = {n: tape.constant(a) for n, a in model.params.items()}
    tau_t = None if tau is None else tape.constant(np.asarray(tau, dtype=np.float64))
    preds = model.forward(tape, bound, inp, tau_t)
    return float(np.sum(np.abs(preds.value * inv_iqr - targets) * weights))


def _objective_and_grad(
    model: TwinModel, inp, profile: TargetProfile, tau: np.ndarray
) -> tuple[float, np.ndarray]:
    targets, weights, inv_iqr = _objective_arrays(profile, model)
    tape = Tape()
    bound = {n: tape.constant(a) for n, a in model.params.items()}
    tau_leaf = tape.leaf(tau)
    preds = model.forward(tape, bound, inp, tau_leaf)
    diff = tape.sub(tape.mul(preds, tape.constant(inv_iqr)), tape.constant(targets))
    j = tape.total_sum(tape.mul(tape.absolute(diff), tape.constant(weights)))
    grads = tape.backward(j)
    return float(j.value), grads[tau_leaf]


def _model_l_max(model: TwinModel) -> int:
    return model.dims.l_max if isinstance(model.dims, GlanceDims) else 16


# -- projected gradient descent over traffic ---------------------------------


def gd_traffic(
    model: TwinModel,
    graph: Graph,
    table: RoutingTable,
    k_targ: TargetProfile,
    tau0: np.ndarray,
    alpha0: float = 0.1,
    max_iters: int = 500,
    bounds: tuple[float, float] = TRAFFIC_BOUNDS,
    capacities: np.ndarray | None = None,
    rel_tol: float = 1e-6,
) -> ManageResult:
    """Minimize J over the (F, 2) on/off traffic means, projected into bounds.

    The step size persists across iterations and is halved (up to 20 times
    per iteration) whenever a step would not strictly improve J, so the
    trajectory is non-increasing by construction.
    """
    if model.kind == "gnn":
        raise ManageError("the gnn baseline has no traffic input to differentiate")
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo < hi:
        raise ManageError(f"bad bounds {bounds}")
    tau = np.asarray(tau0, dtype=np.float64).copy()
    if tau.shape != (k_targ.n_flows, 2):
        raise ManageError(
            f"tau0 must be ({k_targ.n_flows}, 2), got {tau.shape}"
        )
    if np.any(tau < lo) or np.any(tau > hi):
        raise ManageError("tau0 lies outside the projection bounds")
    if capacities is None:
        capacities = link_capacities(graph, default_sim_config(graph.wired))

    traffic = TrafficParams(tuple(tau[:, 0]), tuple(tau[:, 1]))
    inp = prepare_twin_input(graph, table, traffic, capacities, _model_l_max(model))

    alpha = float(alpha0)
    j_cur, grad = _objective_and_grad(model, inp, k_targ, tau)
    trajectory = [j_cur]
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"non-finite gradient at iteration {iters}; tau={tau.tolist()}"
            )
        accepted = False
        for _ in range(21):  # current alpha plus up to 20 halvings
            candidate = np.clip(tau - alpha * grad, lo, hi)
            j_new = twin_objective(model, inp, k_targ, candidate)
            if j_new < j_cur:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:  # no step improves: local optimum at this precision
            converged = True
            break
        improvement = (j_cur - j_new) / max(j_cur, 1e-300)
        tau = candidate
        j_cur = j_new
        trajectory.append(j_cur)
        if improvement < rel_tol:
            converged = True
            break
        _, grad = _objective_and_grad(model, inp, k_targ, tau)
    return ManageResult(
        kind="traffic",
        optimized_traffic=tau,
        optimized_destinations=None,
        trajectory=trajectory,
        iterations=iters,
        converged=converged,
    )


# -- hill-climbing over destinations ------------------------------------------


def _valid_destination_vector(
    rng: np.random.Generator, sources: tuple[int, ...], n_nodes: int
) -> tuple[int, ...]:
    """Per-flow uniform destination != source; redraw until pairs are unique."""
    while True:
        dests = []
        for s in sources:
            d = int(rng.integers(n_nodes - 1))
            dests.append(d if d < s else d + 1)
        pairs = list(zip(sources, dests))
        if len(set(pairs)) == len(pairs):
            return tuple(dests)


def hillclimb_destinations(
    model: TwinModel,
    graph: Graph,
    f_src: tuple[int, ...],
    traffic: TrafficParams,
    k_targ: TargetProfile,
    n_init: int = 100,
    n_rand: int = 5,
    rng_seed: int = 0,
    capacities: np.ndarray | None = None,
) -> ManageResult:
    """Best-of-restarts hill climbing over the destination vector.

    Each restart seeds from the best of n_init random valid vectors, then
    sweeps flows and candidate nodes in shuffled order, accepting only
    strict improvements, until a full sweep accepts nothing. Candidate
    destinations exclude the flow's source and current destination, and any
    node that would duplicate an existing (source, destination) pair.
    Routing inside the twin uses one fixed tie-break seed so J is a pure
    function of the destination vector.
    """
    sources = tuple(int(s) for s in f_src)
    if len(sources) != k_targ.n_flows or len(traffic) != len(sources):
        raise ManageError("f_src, traffic and k_targ disagree on flow count")
    if n_init < 1 or n_rand < 1:
        raise ManageError("n_init and n_rand must be positive")
    n_nodes = graph.n_nodes
    if capacities is None:
        capacities = link_capacities(graph, default_sim_config(graph.wired))
    tie_seed = derive_seed(rng_seed, "ties")
    l_max = _model_l_max(model)

    cache: dict[tuple[int, ...], float] = {}

    def j_of(dests: tuple[int, ...]) -> float:
        if dests in cache:
            return cache[dests]
        flows = FlowSet(sources, dests)
        table = shortest_paths(graph, flows, tie_seed)
        inp = prepare_twin_input(graph, table, traffic, capacities, l_max)
        j = twin_objective(model, inp, k_targ)
        cache[dests] = j
        return j

    best_overall: tuple[float, tuple[int, ...], list[float], int] | None = None
    for restart in range(n_rand):
        rng = make_rng(rng_seed, "restart", restart)
        starts = [
            _valid_destination_vector(rng, sources, n_nodes) for _ in range(n_init)
        ]
        start_js = [j_of(v) for v in starts]
        best_i = int(np.argmin(start_js))
        current = starts[best_i]
        j_cur = start_js[best_i]
        trajectory = [j_cur]
        while True:
            improved = False
            for f in rng.permutation(len(sources)):
                f = int(f)
                used = set(zip(sources, current))
                candidates = [
                    n
                    for n in range(n_nodes)
                    if n != sources[f] and n != current[f]
                ]
                for pick in rng.permutation(len(candidates)):
                    n = candidates[int(pick)]
                    if (sources[f], n) in used:
                        continue
                    trial = current[:f] + (n,) + current[f + 1 :]
                    j_new = j_of(trial)
                    if j_new < j_cur:
                        current = trial
                        j_cur = j_new
                        trajectory.append(j_cur)
                        used = set(zip(sources, current))
                        improved = True
            if not improved:
                break
        if best_overall is None or j_cur < best_overall[0]:
            best_overall = (j_cur, current, trajectory, restart)

    j_best, dests, trajectory, restart = best_overall
    return ManageResult(
        kind="destinations",
        optimized_traffic=None,
        optimized_destinations=dests,
        trajectory=trajectory,
        iterations=len(trajectory) - 1,
        converged=True,
        seed=rng_seed,
        restart_best=restart,
    )


# -- simulator-backed evaluation ----------------------------------------------


@dataclass(frozen=True)
class NetworkInput:
    """A candidate network state: who talks to whom, and how much."""

    flows: FlowSet
    traffic: TrafficParams

    def __post_init__(self) -> None:
        if len(self.flows) != len(self.traffic):
            raise ManageError("flows and traffic disagree on flow count")


def _mean_runs(
    graph: Graph,
    state: NetworkInput,
    config: SimConfig,
    seeds: list[int],
) -> np.ndarray:
    kpis = []
    for s in seeds:
        table = shortest_paths(graph, state.flows, derive_seed(s, "routing"))
        kpis.append(run_sim(graph, table, state.traffic, config, derive_seed(s, "sim")).kpis)
    return _quiet_nanmean(np.stack(kpis), axis=0)


def _masked_mae(
    a: np.ndarray, b: np.ndarray, iqr: np.ndarray
) -> dict:
    """Per-KPI and pooled normalized MAE over cells finite in both."""
    per = {}
    pooled = []
    for k, task in enumerate(TASKS):
        ok = np.isfinite(a[:, k]) & np.isfinite(b[:, k])
        if ok.any():
            errs = np.abs(a[ok, k] - b[ok, k]) / iqr[k]
            per[task] = float(errs.mean())
            pooled.append(errs)
        else:
            per[task] = math.nan
    return {
        "per_task": per,
        "pooled": float(np.concatenate(pooled).mean()) if pooled else math.nan,
    }


def _r2(pred: np.ndarray, targ: np.ndarray) -> float:
    ok = np.isfinite(pred) & np.isfinite(targ)
    if ok.sum() < 2:
        return math.nan
    p, t = pred[ok], targ[ok]
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


def hinge_failure_ratio(
    k_gen_set: list[np.ndarray] | np.ndarray,
    k_targ_set: list[np.ndarray] | np.ndarray,
) -> dict[str, float]:
    """Fraction of cells whose generated KPI violates the target bound.

    Delay, jitter and drops fail above the target; throughput fails below;
    equal values pass. Pooled over every (instance, flow) cell finite in
    both matrices.
    """
    if isinstance(k_gen_set, np.ndarray):
        k_gen_set = [k_gen_set]
    if isinstance(k_targ_set, np.ndarray):
        k_targ_set = [k_targ_set]
    if len(k_gen_set) != len(k_targ_set):
        raise ManageError("hinge sets must pair up")
    out = {}
    for k, task in enumerate(TASKS):
        fails = total = 0
        for gen, targ in zip(k_gen_set, k_targ_set):
            ok = np.isfinite(gen[:, k]) & np.isfinite(targ[:, k])
            g, t = gen[ok, k], targ[ok, k]
            total += int(ok.sum())
            fails += int(np.sum(g > t) if HINGE_UPPER[task] else np.sum(g < t))
        out[task] = fails / total if total else math.nan
    return out


def evaluate_management(
    graph: Graph,
    x_orig: NetworkInput,
    x_gen: NetworkInput,
    config: SimConfig,
    seeds: list[int],
    iqr: np.ndarray,
    result: ManageResult | None = None,
) -> ManageResult:
    """Fill a result with the 9-run simulator protocol.

    Runs 0-2 of the original input set the target average, runs 3-5 of the
    same input form the benchmark average (the noise floor), and the
    proposed input gets runs 6-8. Errors are normalized MAEs against the
    target; hinge ratios and R2 (pooled over normalized cells and per KPI)
    complete the report.
    """
    if len(seeds) != 9 or len(set(seeds)) != 9:
        raise ManageError("evaluation needs nine distinct seeds")
    iqr = np.asarray(iqr, dtype=np.float64)
    if iqr.shape != (len(TASKS),) or np.any(iqr <= 0):
        raise ManageError("iqr must be 4 positive scales")
    k_targ = _mean_runs(graph, x_orig, config, seeds[:3])
    k_bm = _mean_runs(graph, x_orig, config, seeds[3:6])
    k_gen = _mean_runs(graph, x_gen, config, seeds[6:9])
    if result is None:
        result = ManageResult(
            kind="evaluation",
            optimized_traffic=None,
            optimized_destinations=None,
            trajectory=[],
            iterations=0,
            converged=True,
        )
    result.k_targ = k_targ
    result.k_bm = k_bm
    result.k_gen = k_gen
    result.eps_gen = _masked_mae(k_gen, k_targ, iqr)
    result.eps_bm = _masked_mae(k_bm, k_targ, iqr)
    result.hinge_failures = hinge_failure_ratio(k_gen, k_targ)
    gen_n, targ_n = k_gen / iqr, k_targ / iqr
    result.r2 = {
        "pooled": _r2(gen_n.ravel(), targ_n.ravel()),
        "per_task": {
            task: _r2(k_gen[:, k], k_targ[:, k]) for k, task in enumerate(TASKS)
        },
    }
    return result


def trajectory_csv(result: ManageResult) -> str:
    lines = ["step,objective"]
    lines += [f"{i},{j:.12g}" for i, j in enumerate(result.trajectory)]
    return "\n".join(lines) + "\n"
