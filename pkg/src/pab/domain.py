"""Core value types shared by every other module.

The discretized rate grid, probability mass functions over it, routing
topologies with their path-to-link incidence, probe measurements, and the
configuration and estimate records that drive the estimation loop. All types
are immutable values; operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

LinkId = str
PathId = str

# Slack applied when comparing accumulated window mass against a target level,
# so float rounding cannot reject a window whose true mass equals the target.
MASS_SLACK = 1e-9


class TopologyFormatError(ValueError):
    """A topology description is malformed or self-inconsistent."""


class EmptyTopology(TopologyFormatError):
    """A topology with no paths (or no links) was given where one is required."""


@dataclass(frozen=True)
class BandwidthDomain:
    """Integer rate grid b_min..b_max inclusive, in Mbps."""

    b_min: int = 1
    b_max: int = 100

    def __post_init__(self) -> None:
        if self.b_min < 1:
            raise ValueError(f"b_min must be >= 1, got {self.b_min}")
        if self.b_max <= self.b_min:
            raise ValueError(f"b_max must exceed b_min, got [{self.b_min}, {self.b_max}]")

    @property
    def k(self) -> int:
        """Number of grid points."""
        return self.b_max - self.b_min + 1

    def rates(self) -> np.ndarray:
        return np.arange(self.b_min, self.b_max + 1)

    def index(self, rate: int) -> int:
        if not self.b_min <= rate <= self.b_max:
            raise ValueError(f"rate {rate} outside [{self.b_min}, {self.b_max}]")
        return int(rate) - self.b_min

    def __contains__(self, rate: object) -> bool:
        return isinstance(rate, (int, np.integer)) and self.b_min <= rate <= self.b_max


@dataclass(frozen=True)
class Pmf:
    """Probability mass function over a bandwidth domain's grid.

    The mass vector is copied on construction and frozen read-only. Direct
    construction requires an already-normalized vector; use ``normalized`` to
    build one from arbitrary non-negative weights.
    """

    domain: BandwidthDomain
    mass: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.mass, dtype=float)
        if m.shape != (self.domain.k,):
            raise ValueError(f"mass has shape {m.shape}, domain has {self.domain.k} points")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("mass entries must be finite and non-negative")
        total = m.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mass sums to {total!r}, expected 1 within 1e-9")
        m.flags.writeable = False
        object.__setattr__(self, "mass", m)

    @classmethod
    def normalized(cls, domain: BandwidthDomain, weights: Iterable[float]) -> Pmf:
        w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights, dtype=float)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            raise ValueError("weights must have positive finite total mass")
        return cls(domain, w / total)

    @classmethod
    def uniform(cls, domain: BandwidthDomain) -> Pmf:
        return cls(domain, np.full(domain.k, 1.0 / domain.k))

    @classmethod
    def point_mass(cls, domain: BandwidthDomain, rate: int) -> Pmf:
        m = np.zeros(domain.k)
        m[domain.index(rate)] = 1.0
        return cls(domain, m)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)


def posterior_median(pmf: Pmf) -> int:
    """Smallest grid rate whose cumulative mass reaches 0.5."""
    c = np.cumsum(pmf.mass)
    idx = int(np.searchsorted(c, 0.5 - 1e-12))
    idx = min(idx, pmf.domain.k - 1)
    return pmf.domain.b_min + idx


def shortest_credible_interval(pmf: Pmf, eta: float) -> tuple[int, int, float]:
    """Narrowest contiguous grid interval holding at least ``eta`` mass.

    Ties in width are broken by greater mass, then by smaller lower bound.
    Returns (lb, ub, mass) with lb and ub as grid rates, both inclusive.
    """
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    k = pmf.domain.k
    target = eta - MASS_SLACK
    csum = np.concatenate(([0.0], np.cumsum(pmf.mass)))

    def window_masses(width: int) -> np.ndarray:
        # mass of every window spanning width+1 grid points
        return csum[width + 1 :] - csum[: k - width]

    # smallest feasible width by binary search; the full domain is always feasible
    lo, hi = 0, k - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if window_masses(mid).max() >= target:
            hi = mid
        else:
            lo = mid + 1
    wm = window_masses(lo)
    start = int(np.argmax(wm))  # first occurrence of the max: greatest mass, then smallest lb
    lb = pmf.domain.b_min + start
    return lb, lb + lo, float(wm[start])


@dataclass(frozen=True)
class Topology:
    """Directed links, paths, and the ordered path-to-link incidence.

    Links not used by any path are tolerated here (a freshly parsed file may
    declare them); logical reduction drops them.
    """

    links: tuple[LinkId, ...]
    paths: tuple[PathId, ...]
    incidence: Mapping[PathId, tuple[LinkId, ...]]

    def __post_init__(self) -> None:
        if not self.paths or not self.links:
            raise EmptyTopology("topology needs at least one link and one path")
        if len(set(self.links)) != len(self.links):
            raise TopologyFormatError("duplicate link ids")
        if len(set(self.paths)) != len(self.paths):
            raise TopologyFormatError("duplicate path ids")
        if set(self.incidence) != set(self.paths):
            raise TopologyFormatError("incidence keys do not match path ids")
        known = set(self.links)
        for pid, seq in self.incidence.items():
            if not seq:
                raise TopologyFormatError(f"path {pid!r} traverses no links")
            if len(set(seq)) != len(seq):
                raise TopologyFormatError(f"path {pid!r} repeats a link")
            unknown = [l for l in seq if l not in known]
            if unknown:
                raise TopologyFormatError(f"path {pid!r} references unknown link {unknown[0]!r}")

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def paths_using(self, link: LinkId) -> tuple[PathId, ...]:
        return tuple(p for p in self.paths if link in self.incidence[p])


def reduce_to_logical(
    raw_paths: Sequence[Sequence[LinkId]],
    path_ids: Sequence[PathId] | None = None,
) -> Topology:
    """Merge series link chains into single logical links.

    Two links merge when they belong to exactly the same set of paths and sit
    adjacent in every path containing them; only the minimum over such a chain
    is ever identifiable from path measurements. Merged ids join their member
    ids with "+". Idempotent, and preserves per-path min semantics.
    """
    if not raw_paths:
        raise EmptyTopology("no paths given")
    paths = [tuple(p) for p in raw_paths]
    if path_ids is None:
        ids = tuple(f"p{i + 1}" for i in range(len(paths)))
    else:
        ids = tuple(path_ids)
        if len(ids) != len(paths):
            raise TopologyFormatError("path_ids length does not match raw_paths")
    for pid, seq in zip(ids, paths):
        if not seq:
            raise TopologyFormatError(f"path {pid!r} traverses no links")
        if len(set(seq)) != len(seq):
            raise TopologyFormatError(f"path {pid!r} repeats a link")

    membership: dict[LinkId, frozenset[int]] = {}
    position: dict[LinkId, dict[int, int]] = {}
    for i, seq in enumerate(paths):
        for pos, link in enumerate(seq):
            membership.setdefault(link, frozenset())
            membership[link] |= {i}
            position.setdefault(link, {})[i] = pos

    # union-find over links
    parent: dict[LinkId, LinkId] = {l: l for l in membership}

    def find(x: LinkId) -> LinkId:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: LinkId, b: LinkId) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for seq in paths:
        for a, b in zip(seq, seq[1:]):
            if membership[a] != membership[b]:
                continue
            if all(abs(position[a][i] - position[b][i]) == 1 for i in membership[a]):
                union(a, b)

    # canonical member order within a group: order in its first containing path
    groups: dict[LinkId, list[LinkId]] = {}
    for seq in paths:
        for link in seq:
            root = find(link)
            members = groups.setdefault(root, [])
            if link not in members:
                members.append(link)
    group_id = {root: "+".join(members) for root, members in groups.items()}

    incidence: dict[PathId, tuple[LinkId, ...]] = {}
    link_order: list[LinkId] = []
    for pid, seq in zip(ids, paths):
        logical: list[LinkId] = []
        for link in seq:
            gid = group_id[find(link)]
            if not logical or logical[-1] != gid:
                logical.append(gid)
        if len(set(logical)) != len(logical):
            raise TopologyFormatError(f"path {pid!r} revisits a merged link chain")
        incidence[pid] = tuple(logical)
        for gid in logical:
            if gid not in link_order:
                link_order.append(gid)
    return Topology(links=tuple(link_order), paths=ids, incidence=incidence)


def parse_topology(text: str) -> Topology:
    """Parse the line-oriented topology format.

    ``link <id>`` declares a link, ``path <id> <link-id> ...`` declares an
    ordered path over declared links, ``#`` starts a comment. Unknown link
    references are rejected.
    """
    links: list[LinkId] = []
    paths: list[PathId] = []
    incidence: dict[PathId, tuple[LinkId, ...]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "link":
            if len(tokens) != 2:
                raise TopologyFormatError(f"line {lineno}: link takes exactly one id")
            if tokens[1] in links:
                raise TopologyFormatError(f"line {lineno}: duplicate link {tokens[1]!r}")
            links.append(tokens[1])
        elif kind == "path":
            if len(tokens) < 3:
                raise TopologyFormatError(f"line {lineno}: path needs an id and at least one link")
            pid = tokens[1]
            if pid in incidence:
                raise TopologyFormatError(f"line {lineno}: duplicate path {pid!r}")
            for ref in tokens[2:]:
                if ref not in links:
                    raise TopologyFormatError(f"line {lineno}: unknown link {ref!r}")
            paths.append(pid)
            incidence[pid] = tuple(tokens[2:])
        else:
            raise TopologyFormatError(f"line {lineno}: unknown directive {kind!r}")
    if not links or not paths:
        raise EmptyTopology("topology file declares no links or no paths")
    return Topology(links=tuple(links), paths=tuple(paths), incidence=incidence)


def load_topology(path: str) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_topology(fh.read())


def format_topology(topology: Topology) -> str:
    lines = [f"link {l}" for l in topology.links]
    lines += [f"path {p} " + " ".join(topology.incidence[p]) for p in topology.paths]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Measurement:
    """One probe outcome: path, ingress rate, and the binary rate difference test result."""

    path: PathId
    rate: int
    outcome: int
    seq: int = 0

    def __post_init__(self) -> None:
        if self.outcome not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {self.outcome!r}")
        if self.seq < 0:
            raise ValueError("seq must be non-negative")


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimation parameters: rate tolerance, stopping thresholds, budget, grid."""

    domain: BandwidthDomain = BandwidthDomain()
    epsilon: float = 5.0
    delta: float = 0.05
    eta: float = 0.95
    beta: float = 10.0
    max_measurements: int = 10000

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.5 < self.eta < 1:
            raise ValueError(f"eta must lie in (0.5, 1), got {self.eta}")
        if not 0 < self.beta < (self.domain.b_max - self.domain.b_min):
            raise ValueError(f"beta must lie in (0, {self.domain.b_max - self.domain.b_min})")
        if self.max_measurements < 1:
            raise ValueError("max_measurements must be >= 1")


@dataclass(frozen=True)
class PathEstimate:
    """Per-path posterior summary: shortest credible interval and its verdict."""

    path: PathId
    lb: int
    ub: int
    mass_in_interval: float
    width: int
    satisfied: bool

    def __post_init__(self) -> None:
        if self.lb > self.ub:
            raise ValueError(f"lb {self.lb} exceeds ub {self.ub}")
        if self.width != self.ub - self.lb:
            raise ValueError("width must equal ub - lb")

    @classmethod
    def from_pmf(cls, path: PathId, pmf: Pmf, config: EstimatorConfig) -> PathEstimate:
        lb, ub, mass = shortest_credible_interval(pmf, config.eta)
        width = ub - lb
        ok = mass >= config.eta - MASS_SLACK and width <= config.beta
        return cls(path=path, lb=lb, ub=ub, mass_in_interval=mass, width=width, satisfied=ok)
