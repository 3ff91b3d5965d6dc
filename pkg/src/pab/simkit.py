"""Ground-truth network simulation and the experiment harness.

Generates random connected topologies, plants integer link bandwidths drawn
uniformly on the grid, answers probes through a likelihood-model oracle, and
compares the selection policies over many seed-matched trials. Reports carry
per-trial rows plus scatter data relating measurement cost to how many
distinct tight links the topology planted.
"""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

from pab.domain import (
    BandwidthDomain,
    EstimatorConfig,
    LinkId,
    PathId,
    Topology,
    load_topology,
    reduce_to_logical,
)
from pab.learner import PolicyKind, SelectionPolicy, run_session
from pab.likelihood import LikelihoodModel, likelihood_of

class InfeasibleParams(ValueError):
    """The requested topology cannot be realized."""


class ExperimentSpecError(ValueError):
    """An experiment spec file is malformed or names unknown keys."""


@dataclass(frozen=True)
class TopologyParams:
    """Generator knobs: tree backbone size, extra cross edges, path count."""

    nodes: int = 12
    extra_links: int = 3
    paths: int = 8
    fixture: str | None = None

    def __post_init__(self) -> None:
        if self.fixture is not None:
            return
        if self.nodes < 2:
            raise InfeasibleParams("need at least 2 nodes")
        if self.paths < 1:
            raise InfeasibleParams("need at least 1 path")
        if self.extra_links < 0:
            raise InfeasibleParams("extra_links must be non-negative")


@dataclass(frozen=True)
class GroundTruth:
    """Planted per-link bandwidths and the per-path minima they induce."""

    link_bandwidth: Mapping[LinkId, int]
    path_bandwidth: Mapping[PathId, int]
    tight_link_count: int


def shared_trunk_topology() -> Topology:
    """Named fixture: two ingress links into a shared trunk, two egress links.

    Four paths cross the trunk, giving the smallest topology where inference
    must attribute a shared bottleneck to the common link rather than to the
    private ones.
    """
    return Topology(
        links=("in_a", "in_b", "trunk", "out_a", "out_b"),
        paths=("p1", "p2", "p3", "p4"),
        incidence={
            "p1": ("in_a", "trunk", "out_a"),
            "p2": ("in_a", "trunk", "out_b"),
            "p3": ("in_b", "trunk", "out_a"),
            "p4": ("in_b", "trunk", "out_b"),
        },
    )


def _dijkstra(adj: Mapping[int, list[tuple[int, float]]], src: int, dst: int, n: int) -> list[int]:
    dist = [float("inf")] * n
    prev = [-1] * n
    dist[src] = 0.0
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == dst:
            break
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if dist[dst] == float("inf"):
        raise InfeasibleParams(f"no route from {src} to {dst}")
    route = [dst]
    while route[-1] != src:
        route.append(prev[route[-1]])
    route.reverse()
    return route


def generate_topology(params: TopologyParams, seed) -> Topology:
    """Random connected logical topology, deterministic per seed.

    A random tree backbone plus extra cross edges; paths are shortest routes
    between distinct ordered node pairs under random per-instance edge
    weights, then reduced to logical links. Directed link ids are "u-v".
    """
    if params.fixture == "shared_trunk":
        return shared_trunk_topology()
    if params.fixture is not None:
        raise InfeasibleParams(f"unknown fixture {params.fixture!r}")
    rng = np.random.default_rng(seed)
    n = params.nodes
    if params.paths > n * (n - 1):
        raise InfeasibleParams(f"{params.paths} distinct ordered pairs impossible with {n} nodes")

    edges = [(int(rng.integers(0, v)), v) for v in range(1, n)]
    taken = set(edges)
    if params.extra_links:
        cands = [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in taken]
        if cands:
            pick = rng.choice(len(cands), size=min(params.extra_links, len(cands)), replace=False)
            edges.extend(cands[i] for i in sorted(int(i) for i in pick))
    weights = rng.random(len(edges)) + 0.1
    adj: dict[int, list[tuple[int, float]]] = defaultdict(list)
    for (u, v), w in zip(edges, weights):
        adj[u].append((v, float(w)))
        adj[v].append((u, float(w)))
    for lst in adj.values():
        lst.sort()

    pair_idx = rng.choice(n * (n - 1), size=params.paths, replace=False)
    raw_paths: list[list[LinkId]] = []
    for idx in (int(i) for i in pair_idx):
        src = idx // (n - 1)
        t = idx % (n - 1)
        dst = t if t < src else t + 1
        route = _dijkstra(adj, src, dst, n)
        raw_paths.append([f"{a}-{b}" for a, b in zip(route, route[1:])])
    return reduce_to_logical(raw_paths)


def plant_truth(topology: Topology, domain: BandwidthDomain, seed) -> GroundTruth:
    """Draw i.i.d. uniform integer link bandwidths; derive exact path minima.

    The tight link of a path is the earliest link in path order achieving
    its minimum; the count is over distinct such links.
    """
    rng = np.random.default_rng(seed)
    vals = rng.integers(domain.b_min, domain.b_max + 1, size=len(topology.links))
    link_bw = {l: int(v) for l, v in zip(topology.links, vals)}
    path_bw: dict[PathId, int] = {}
    tight: set[LinkId] = set()
    for p in topology.paths:
        seq = topology.incidence[p]
        bws = [link_bw[l] for l in seq]
        mn = min(bws)
        path_bw[p] = mn
        tight.add(seq[bws.index(mn)])
    return GroundTruth(link_bandwidth=link_bw, path_bandwidth=path_bw, tight_link_count=len(tight))


def oracle_measure(
    truth: GroundTruth,
    model: LikelihoodModel,
    path: PathId,
    rate: int,
    rng: np.random.Generator,
) -> int:
    """Bernoulli probe outcome with success probability taken from the model."""
    if path not in truth.path_bandwidth:
        raise KeyError(f"path {path!r} not in ground truth")
    p1 = likelihood_of(model, 1, truth.path_bandwidth[path], rate)
    return int(rng.random() < p1)


@dataclass(eq=False)
class OracleMeasurer:
    """Measurer adapter over a planted ground truth, for run_session."""

    truth: GroundTruth
    model: LikelihoodModel
    rng: np.random.Generator

    def __call__(self, path: PathId, rate: int) -> int:
        return oracle_measure(self.truth, self.model, path, rate, self.rng)


@dataclass(frozen=True)
class ExperimentSpec:
    """One policy-comparison experiment: topology source, trials, models, seed."""

    config: EstimatorConfig
    estimator_model: LikelihoodModel
    oracle_model: LikelihoodModel
    policies: tuple[str, ...] = ("RR", "SEQ", "WE", "WCI")
    trials: int = 1
    seed: int = 0
    topology_file: str | None = None
    params: TopologyParams | None = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.policies:
            raise ValueError("at least one policy required")
        for p in self.policies:
            PolicyKind(p)  # raises ValueError on unknown names
        if (self.topology_file is None) == (self.params is None):
            raise ValueError("exactly one of topology_file and params must be set")


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    policy: str
    measurements: int
    accuracy: float
    tight_link_count: int
    n_links: int
    n_paths: int
    termination: str
    wall_time_s: float  # in-memory diagnostic, excluded from artifacts


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    spec: ExperimentSpec
    records: tuple[TrialRecord, ...]
    interrupted: bool = False

    def aggregates(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for kind in self.spec.policies:
            rs = [r for r in self.records if r.policy == kind]
            if not rs:
                continue
            out[kind] = {
                "mean_measurements": float(np.mean([r.measurements for r in rs])),
                "mean_measurements_per_path": float(np.mean([r.measurements / r.n_paths for r in rs])),
                "mean_accuracy": float(np.mean([r.accuracy for r in rs])),
            }
        return out

    def scatter_rows(self) -> list[tuple[float, float, str]]:
        return [
            (r.tight_link_count / r.n_paths, r.measurements / r.n_paths, r.policy)
            for r in self.records
        ]

    def to_json_dict(self) -> dict:
        spec = self.spec
        return {
            "spec": {
                "trials": spec.trials,
                "seed": spec.seed,
                "policies": list(spec.policies),
                "topology_file": spec.topology_file,
                "params": None
                if spec.params is None
                else {
                    "nodes": spec.params.nodes,
                    "extra_links": spec.params.extra_links,
                    "paths": spec.params.paths,
                    "fixture": spec.params.fixture,
                },
                "config": {
                    "b_min": spec.config.domain.b_min,
                    "b_max": spec.config.domain.b_max,
                    "epsilon": spec.config.epsilon,
                    "delta": spec.config.delta,
                    "eta": spec.config.eta,
                    "beta": spec.config.beta,
                    "max_measurements": spec.config.max_measurements,
                },
                "estimator_model": {"alpha": spec.estimator_model.alpha, "kappa": spec.estimator_model.kappa},
                "oracle_model": {"alpha": spec.oracle_model.alpha, "kappa": spec.oracle_model.kappa},
            },
            "interrupted": self.interrupted,
            "aggregates": self.aggregates(),
            "trials": [
                {
                    "trial": r.trial,
                    "policy": r.policy,
                    "measurements": r.measurements,
                    "accuracy": r.accuracy,
                    "tight_link_count": r.tight_link_count,
                    "n_links": r.n_links,
                    "n_paths": r.n_paths,
                    "termination": r.termination,
                }
                for r in self.records
            ],
        }

    def write_json(self, fh: TextIO) -> None:
        json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    def write_trials_csv(self, fh: TextIO) -> None:
        fh.write("trial,policy,measurements,accuracy,tight_link_count,n_links,n_paths,termination\n")
        for r in self.records:
            fh.write(
                f"{r.trial},{r.policy},{r.measurements},{r.accuracy!r},"
                f"{r.tight_link_count},{r.n_links},{r.n_paths},{r.termination}\n"
            )

    def write_scatter_csv(self, fh: TextIO) -> None:
        fh.write("tight_links_per_path,measurements_per_path,policy\n")
        for x, y, kind in self.scatter_rows():
            fh.write(f"{x!r},{y!r},{kind}\n")


def _reduced(topology: Topology) -> Topology:
    return reduce_to_logical([topology.incidence[p] for p in topology.paths], topology.paths)


def run_experiment(
    spec: ExperimentSpec,
    progress: Callable[[TrialRecord], None] | None = None,
) -> ExperimentReport:
    """Run every (trial, policy) session with seed-matched topologies and oracles.

    Per trial, all policies see the same topology, the same planted truth,
    the same policy seed, and oracle generators started from the same seed.
    A keyboard interrupt returns the partial report instead of raising.
    """
    fixed_topo = _reduced(load_topology(spec.topology_file)) if spec.topology_file else None
    records: list[TrialRecord] = []
    interrupted = False
    try:
        for trial in range(spec.trials):
            ss = np.random.SeedSequence((spec.seed, trial))
            topo_ss, truth_ss, sess_ss = ss.spawn(3)
            topo = fixed_topo if fixed_topo is not None else generate_topology(spec.params, topo_ss)
            truth = plant_truth(topo, spec.config.domain, truth_ss)
            oracle_ss, policy_ss = sess_ss.spawn(2)
            policy_seed = int(policy_ss.generate_state(1)[0])
            for kind in spec.policies:
                measurer = OracleMeasurer(truth, spec.oracle_model, np.random.default_rng(oracle_ss))
                report = run_session(
                    topo,
                    spec.config,
                    spec.estimator_model,
                    SelectionPolicy(kind=kind, rng_seed=policy_seed),
                    measurer,
                )
                correct = [
                    1.0
                    if report.estimates[p].lb <= truth.path_bandwidth[p] <= report.estimates[p].ub
                    else 0.0
                    for p in topo.paths
                ]
                rec = TrialRecord(
                    trial=trial,
                    policy=PolicyKind(kind).value,
                    measurements=report.measurement_count,
                    accuracy=float(np.mean(correct)),
                    tight_link_count=truth.tight_link_count,
                    n_links=topo.n_links,
                    n_paths=topo.n_paths,
                    termination=report.termination,
                    wall_time_s=report.wall_time_s,
                )
                records.append(rec)
                if progress is not None:
                    progress(rec)
    except KeyboardInterrupt:
        interrupted = True
    return ExperimentReport(spec=spec, records=tuple(records), interrupted=interrupted)


_SPEC_KEYS = {
    "topology_file",
    "fixture",
    "nodes",
    "extra_links",
    "paths",
    "trials",
    "seed",
    "policies",
    "b_min",
    "b_max",
    "epsilon",
    "delta",
    "eta",
    "beta",
    "max_measurements",
    "alpha",
    "kappa",
    "oracle_alpha",
    "oracle_kappa",
    "output_dir",
}

_GENERATOR_KEYS = {"fixture", "nodes", "extra_links", "paths"}


def parse_experiment_spec(text: str, overrides: Sequence[str] = ()) -> tuple[ExperimentSpec, dict[str, str]]:
    """Parse the key=value experiment format; overrides are more key=value pairs.

    Unknown keys are rejected, not ignored. Returns the spec plus a dict of
    the keys that concern the caller rather than the experiment (output_dir).
    """
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ExperimentSpecError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in kv:
            raise ExperimentSpecError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = val
    for item in overrides:
        if "=" not in item:
            raise ExperimentSpecError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        kv[key.strip()] = val.strip()

    unknown = sorted(set(kv) - _SPEC_KEYS)
    if unknown:
        raise ExperimentSpecError(f"unknown key {unknown[0]!r}")

    def geti(key: str, default: int) -> int:
        try:
            return int(kv.get(key, default))
        except ValueError:
            raise ExperimentSpecError(f"key {key!r}: expected integer, got {kv[key]!r}") from None

    def getf(key: str, default: float) -> float:
        try:
            return float(kv.get(key, default))
        except ValueError:
            raise ExperimentSpecError(f"key {key!r}: expected number, got {kv[key]!r}") from None

    try:
        domain = BandwidthDomain(b_min=geti("b_min", 1), b_max=geti("b_max", 100))
        config = EstimatorConfig(
            domain=domain,
            epsilon=getf("epsilon", 5.0),
            delta=getf("delta", 0.05),
            eta=getf("eta", 0.95),
            beta=getf("beta", 10.0),
            max_measurements=geti("max_measurements", 10000),
        )
        estimator = LikelihoodModel(alpha=getf("alpha", 0.5), kappa=getf("kappa", 0.05))
        oracle = LikelihoodModel(
            alpha=getf("oracle_alpha", estimator.alpha),
            kappa=getf("oracle_kappa", estimator.kappa),
        )
        policies = tuple(p.strip() for p in kv.get("policies", "RR,SEQ,WE,WCI").split(",") if p.strip())
        topology_file = kv.get("topology_file")
        params = None
        if topology_file is None:
            params = TopologyParams(
                nodes=geti("nodes", 12),
                extra_links=geti("extra_links", 3),
                paths=geti("paths", 8),
                fixture=kv.get("fixture"),
            )
        elif kv.keys() & _GENERATOR_KEYS:
            clash = sorted(kv.keys() & _GENERATOR_KEYS)[0]
            raise ExperimentSpecError(f"key {clash!r} conflicts with topology_file")
        spec = ExperimentSpec(
            config=config,
            estimator_model=estimator,
            oracle_model=oracle,
            policies=policies,
            trials=geti("trials", 1),
            seed=geti("seed", 0),
            topology_file=topology_file,
            params=params,
        )
    except (ValueError, InfeasibleParams) as exc:
        if isinstance(exc, ExperimentSpecError):
            raise
        raise ExperimentSpecError(str(exc)) from None
    extras = {k: kv[k] for k in ("output_dir",) if k in kv}
    return spec, extras


def load_experiment_spec(path: str, overrides: Sequence[str] = ()) -> tuple[ExperimentSpec, dict[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_experiment_spec(fh.read(), overrides)
