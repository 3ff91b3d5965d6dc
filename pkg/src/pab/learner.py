"""The outer active-learning loop: pick a path, pick a rate, probe, update.

Path selection policies: RR cycles the unsatisfied paths, SEQ drains them
one at a time with no information shared across paths, WE samples by
posterior entropy, WCI samples by credible-interval width. Rates always
bisect at the posterior median. A session ends when every path's shortest
credible interval is narrow enough at the target confidence, or when the
measurement budget runs out.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, TextIO

import numpy as np
from numba import njit

from pab.domain import (
    MASS_SLACK,
    EstimatorConfig,
    Measurement,
    PathEstimate,
    PathId,
    Pmf,
    Topology,
)
from pab.inference import (
    BpResult,
    BpSchedule,
    FactorGraph,
    add_evidence,
    build,
    run_bp,
)
from pab.likelihood import LikelihoodModel

# measurer contract: called as measurer(path, rate) -> 0 or 1, may raise
Measurer = Callable[[PathId, int], int]


class AllSatisfied(RuntimeError):
    """select_path was asked to choose, but no selectable unsatisfied path remains."""


class PolicyKind(str, Enum):
    RR = "RR"
    SEQ = "SEQ"
    WE = "WE"
    WCI = "WCI"


@dataclass(frozen=True)
class SelectionPolicy:
    kind: PolicyKind
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))


@njit(cache=True)
def _interval_scan(mass, target):
    """Shortest credible interval per row: (lb_idx, ub_idx, mass) arrays.

    Same search and tie-breaking as domain.shortest_credible_interval
    (min width, then max mass, then min lb), batched for the hot loop.
    """
    B, K = mass.shape
    lb = np.empty(B, np.int64)
    ub = np.empty(B, np.int64)
    mv = np.empty(B)
    csum = np.empty(K + 1)
    for b in range(B):
        csum[0] = 0.0
        for x in range(K):
            csum[x + 1] = csum[x] + mass[b, x]
        lo = 0
        hi = K - 1
        while lo < hi:
            mid = (lo + hi) // 2
            best = 0.0
            for s in range(K - mid):
                v = csum[s + mid + 1] - csum[s]
                if v > best:
                    best = v
            if best >= target:
                hi = mid
            else:
                lo = mid + 1
        best = -1.0
        bs = 0
        for s in range(K - lo):
            v = csum[s + lo + 1] - csum[s]
            if v > best:
                best = v
                bs = s
        lb[b] = bs
        ub[b] = bs + lo
        mv[b] = best
    return lb, ub, mv


@dataclass(eq=False)
class SessionState:
    """Mutable state of one estimation session.

    estimates always reflect the marginals of the latest belief propagation
    run over the full history. The trailing fields are loop internals.
    """

    graph: FactorGraph
    config: EstimatorConfig
    model: LikelihoodModel
    policy: SelectionPolicy
    history: list[Measurement]
    estimates: dict[PathId, PathEstimate]
    result: BpResult
    schedule: BpSchedule
    rng: np.random.Generator
    rr_pos: int = -1
    failed: set[PathId] = field(default_factory=set)


def _decoupled(topology: Topology) -> Topology:
    # one private logical link per path: no information flows between paths
    links = tuple(f"{p}:link" for p in topology.paths)
    incidence = {p: (f"{p}:link",) for p in topology.paths}
    return Topology(links=links, paths=topology.paths, incidence=incidence)


def start_session(
    topology: Topology,
    config: EstimatorConfig,
    model: LikelihoodModel,
    policy: SelectionPolicy,
    schedule: BpSchedule = BpSchedule(),
) -> SessionState:
    """Build the graph (decoupled for SEQ), run evidence-free BP, score paths."""
    topo = _decoupled(topology) if policy.kind is PolicyKind.SEQ else topology
    graph = build(topo, Pmf.uniform(config.domain), config.domain)
    result = run_bp(graph, schedule)
    state = SessionState(
        graph=graph,
        config=config,
        model=model,
        policy=policy,
        history=[],
        estimates={},
        result=result,
        schedule=schedule,
        rng=np.random.default_rng(policy.rng_seed),
    )
    update_estimates(state)
    return state


def update_estimates(state: SessionState) -> dict[PathId, PathEstimate]:
    """Recompute every path's shortest credible interval from current marginals."""
    cfg = state.config
    target = cfg.eta - MASS_SLACK
    lb_i, ub_i, mv = _interval_scan(state.result.path_mass, target)
    b_min = cfg.domain.b_min
    estimates: dict[PathId, PathEstimate] = {}
    for j, pid in enumerate(state.result.path_ids):
        width = int(ub_i[j] - lb_i[j])
        estimates[pid] = PathEstimate(
            path=pid,
            lb=b_min + int(lb_i[j]),
            ub=b_min + int(ub_i[j]),
            mass_in_interval=float(mv[j]),
            width=width,
            satisfied=bool(mv[j] >= target and width <= cfg.beta),
        )
    state.estimates = estimates
    return estimates


def _selectable(state: SessionState) -> list[PathId]:
    return [
        p
        for p in state.graph.path_ids
        if not state.estimates[p].satisfied and p not in state.failed
    ]


def _entropy_rows(mass: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mass > 0, mass * np.log(mass), 0.0)
    return -terms.sum(axis=1)


def select_path(state: SessionState) -> PathId:
    """Pick the next path to probe under the session's policy.

    A satisfied path is never returned. WE weights unsatisfied paths by
    posterior entropy and WCI by interval width (weight 0 if the width is
    already within beta); both sample from the seeded generator after
    normalization, falling back to a uniform draw if every weight is zero.
    """
    active = _selectable(state)
    if not active:
        raise AllSatisfied("no unsatisfied path is selectable")
    kind = state.policy.kind
    if kind is PolicyKind.SEQ:
        return active[0]
    if kind is PolicyKind.RR:
        order = state.graph.path_ids
        n = len(order)
        for step in range(1, n + 1):
            cand = order[(state.rr_pos + step) % n]
            if cand in active:
                state.rr_pos = (state.rr_pos + step) % n
                return cand
        raise AllSatisfied("no unsatisfied path is selectable")  # unreachable

    idx = [state.graph.path_ids.index(p) for p in active]
    beta = state.config.beta
    widths = np.array([state.estimates[p].width for p in active], dtype=float)
    if kind is PolicyKind.WE:
        weights = np.where(widths > beta, _entropy_rows(state.result.path_mass[idx]), 0.0)
    else:  # WCI
        weights = np.where(widths > beta, widths, 0.0)
    total = weights.sum()
    if total <= 0:
        probs = np.full(len(active), 1.0 / len(active))
    else:
        probs = weights / total
    return active[int(state.rng.choice(len(active), p=probs))]


def select_rate(state: SessionState, path: PathId) -> int:
    """Probe rate that bisects the path's posterior: its median."""
    j = state.graph.path_index(path)
    csum = np.cumsum(state.result.path_mass[j])
    idx = min(int(np.searchsorted(csum, 0.5 - 1e-12)), state.config.domain.k - 1)
    return state.config.domain.b_min + idx


@dataclass(frozen=True, eq=False)
class SessionReport:
    """Everything one session did: history, snapshots, final estimates."""

    policy: str
    seed: int
    config: EstimatorConfig
    termination: str  # criteria_met | budget | paths_failed
    path_ids: tuple[PathId, ...]
    history: tuple[Measurement, ...]
    estimates: Mapping[PathId, PathEstimate]
    snapshot_lb: np.ndarray  # (len(history), n_paths) int32, post-update bounds
    snapshot_ub: np.ndarray
    failures: tuple[str, ...]
    bp_sweeps: int
    wall_time_s: float  # in-memory diagnostic, never serialized

    @property
    def measurement_count(self) -> int:
        return len(self.history)

    def to_json_dict(self) -> dict:
        iterations = []
        for t, m in enumerate(self.history):
            iterations.append(
                {
                    "k": m.seq,
                    "path": m.path,
                    "rate": m.rate,
                    "z": m.outcome,
                    "intervals": {
                        p: [int(self.snapshot_lb[t, j]), int(self.snapshot_ub[t, j])]
                        for j, p in enumerate(self.path_ids)
                    },
                }
            )
        return {
            "policy": self.policy,
            "seed": self.seed,
            "config": {
                "b_min": self.config.domain.b_min,
                "b_max": self.config.domain.b_max,
                "epsilon": self.config.epsilon,
                "delta": self.config.delta,
                "eta": self.config.eta,
                "beta": self.config.beta,
                "max_measurements": self.config.max_measurements,
            },
            "termination": self.termination,
            "failures": list(self.failures),
            "iterations": iterations,
            "final_estimates": {
                p: {
                    "lb": e.lb,
                    "ub": e.ub,
                    "mass": e.mass_in_interval,
                    "width": e.width,
                    "satisfied": e.satisfied,
                }
                for p, e in sorted(self.estimates.items())
            },
        }

    def write_json(self, fh: TextIO) -> None:
        json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    def write_csv(self, fh: TextIO) -> None:
        """Per-iteration rows for plotting: the measured path's updated interval."""
        fh.write("k,path,rate,z,lb,ub\n")
        for t, m in enumerate(self.history):
            j = self.path_ids.index(m.path)
            fh.write(
                f"{m.seq},{m.path},{m.rate},{m.outcome},"
                f"{int(self.snapshot_lb[t, j])},{int(self.snapshot_ub[t, j])}\n"
            )


def run_session(
    topology: Topology,
    config: EstimatorConfig,
    model: LikelihoodModel,
    policy: SelectionPolicy,
    measurer: Measurer,
    schedule: BpSchedule = BpSchedule(),
) -> SessionReport:
    """Run the estimation loop until every path satisfies or the budget ends.

    A measurer failure is retried once; failing again marks the path failed
    and excludes it from selection for the rest of the session. Failures are
    logged in the report and never count against the budget.
    """
    t0 = time.perf_counter()
    state = start_session(topology, config, model, policy, schedule)
    snap_lb: list[np.ndarray] = []
    snap_ub: list[np.ndarray] = []
    failures: list[str] = []
    bp_sweeps = state.result.iterations
    order = state.graph.path_ids

    while True:
        unsatisfied = [p for p in order if not state.estimates[p].satisfied]
        if not unsatisfied:
            termination = "criteria_met"
            break
        if len(state.history) >= config.max_measurements:
            termination = "budget"
            break
        if all(p in state.failed for p in unsatisfied):
            termination = "paths_failed"
            break
        path = select_path(state)
        rate = select_rate(state, path)
        try:
            outcome = measurer(path, rate)
        except Exception as first:  # any measurer failure, by contract
            failures.append(f"{path} at {rate}: {first}; retrying")
            try:
                outcome = measurer(path, rate)
            except Exception as second:
                failures.append(f"{path} at {rate}: {second}; path marked failed")
                state.failed.add(path)
                continue
        m = Measurement(path=path, rate=rate, outcome=int(outcome), seq=len(state.history))
        state.graph = add_evidence(state.graph, m, model)
        state.result = run_bp(state.graph, schedule, warm_start=state.result.messages)
        bp_sweeps += state.result.iterations
        state.history.append(m)
        update_estimates(state)
        lbs = np.fromiter((state.estimates[p].lb for p in order), dtype=np.int32, count=len(order))
        ubs = np.fromiter((state.estimates[p].ub for p in order), dtype=np.int32, count=len(order))
        snap_lb.append(lbs)
        snap_ub.append(ubs)

    n = len(state.history)
    return SessionReport(
        policy=state.policy.kind.value,
        seed=state.policy.rng_seed,
        config=config,
        termination=termination,
        path_ids=order,
        history=tuple(state.history),
        estimates=dict(state.estimates),
        snapshot_lb=np.vstack(snap_lb) if n else np.zeros((0, len(order)), dtype=np.int32),
        snapshot_ub=np.vstack(snap_ub) if n else np.zeros((0, len(order)), dtype=np.int32),
        failures=tuple(failures),
        bp_sweeps=bp_sweeps,
        wall_time_s=time.perf_counter() - t0,
    )
