"""Factor graph construction and loopy belief propagation.

One variable node per logical link and per path, a min factor tying each
path variable to its links (path bandwidth is the minimum over link
bandwidths), a shared prior factor per link, and per-path evidence built by
folding measurement likelihood factors into a running pointwise product.
Messages live in the linear domain; the two min-factor message operations
run in O(n*k) through survival-function products rather than joint
enumeration, and the synchronous sweep is compiled with numba since the
estimation loop re-runs belief propagation after every measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, TextIO

import numpy as np
from numba import njit

from pab.domain import (
    BandwidthDomain,
    LinkId,
    Measurement,
    PathId,
    Pmf,
    Topology,
)
from pab.likelihood import LikelihoodModel, likelihood_curve

# Every evidence entry is clamped here after each update so a single noisy
# outcome can never irreversibly kill a hypothesis.
EVIDENCE_FLOOR = 1e-12
# Underflow guard on stored messages; far below any tolerance in use.
MESSAGE_FLOOR = 1e-300


class DomainMismatch(ValueError):
    """Messages or priors defined on different rate grids were combined."""


class UnknownPath(ValueError):
    """A measurement or query references a path the graph does not contain."""


@dataclass(frozen=True)
class BpSchedule:
    """Synchronous flooding schedule: damped factor-to-variable updates."""

    max_iterations: int = 200
    convergence_tol: float = 1e-6
    damping: float = 0.3

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")
        if not 0 <= self.damping < 1:
            raise ValueError(f"damping must lie in [0, 1), got {self.damping}")


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Immutable factor graph plus the folded per-path evidence.

    Construct through ``build``; ``add_evidence`` returns a new graph sharing
    structure. The flat edge arrays index one edge per (path, link) incidence
    pair, grouped contiguously by path, with a by-link grouping alongside.
    """

    topology: Topology
    domain: BandwidthDomain
    prior: Pmf
    evidence: np.ndarray  # (M, k) rows normalized, floored at EVIDENCE_FLOOR
    path_ids: tuple[PathId, ...]
    link_ids: tuple[LinkId, ...]
    edge_link: np.ndarray  # (E,) link index of each edge, path-major order
    path_ptr: np.ndarray  # (M,) first edge of each path
    path_len: np.ndarray  # (M,) edges per path
    link_edges: np.ndarray  # (E,) edge indices regrouped by link
    link_ptr: np.ndarray  # (N,) first entry of each link's group
    link_len: np.ndarray  # (N,) edges per link

    @property
    def n_edges(self) -> int:
        return int(self.edge_link.shape[0])

    def path_index(self, path: PathId) -> int:
        try:
            return self.path_ids.index(path)
        except ValueError:
            raise UnknownPath(f"path {path!r} is not in the graph") from None


def build(topology: Topology, prior: Pmf, domain: BandwidthDomain) -> FactorGraph:
    """Build the factor graph for a logically reduced topology.

    All messages start uniform and the evidence factors start vacuous.
    Links that no path uses are rejected: they indicate an unreduced or
    inconsistent topology.
    """
    if prior.domain != domain:
        raise DomainMismatch("prior is defined on a different rate grid")
    path_ids = topology.paths
    link_ids = topology.links
    link_index = {l: i for i, l in enumerate(link_ids)}
    used = set()
    edge_link_list: list[int] = []
    path_len = np.zeros(len(path_ids), dtype=np.int64)
    for j, pid in enumerate(path_ids):
        seq = topology.incidence[pid]
        path_len[j] = len(seq)
        for l in seq:
            edge_link_list.append(link_index[l])
            used.add(l)
    unused = [l for l in link_ids if l not in used]
    if unused:
        raise ValueError(f"link {unused[0]!r} is on no path; reduce the topology first")
    edge_link = np.array(edge_link_list, dtype=np.int64)
    path_ptr = np.concatenate(([0], np.cumsum(path_len)[:-1])).astype(np.int64)
    link_edges = np.argsort(edge_link, kind="stable").astype(np.int64)
    link_len = np.bincount(edge_link, minlength=len(link_ids)).astype(np.int64)
    link_ptr = np.concatenate(([0], np.cumsum(link_len)[:-1])).astype(np.int64)
    evidence = np.full((len(path_ids), domain.k), 1.0 / domain.k)
    evidence.flags.writeable = False
    return FactorGraph(
        topology=topology,
        domain=domain,
        prior=prior,
        evidence=evidence,
        path_ids=path_ids,
        link_ids=link_ids,
        edge_link=edge_link,
        path_ptr=path_ptr,
        path_len=path_len,
        link_edges=link_edges,
        link_ptr=link_ptr,
        link_len=link_len,
    )


def add_evidence(graph: FactorGraph, m: Measurement, model: LikelihoodModel) -> FactorGraph:
    """Fold one measurement's likelihood into its path's evidence product.

    Returns a new graph; structure and other paths' evidence are shared.
    The updated row is renormalized and clamped to EVIDENCE_FLOOR, so the
    stored evidence equals the true likelihood product up to one positive
    scalar per path, which belief propagation cannot see.
    """
    j = graph.path_index(m.path)
    graph.domain.index(m.rate)  # raises if the rate is off the grid
    curve = likelihood_curve(model, m.outcome, graph.domain, m.rate)
    evidence = graph.evidence.copy()
    row = evidence[j] * curve
    row /= row.sum()
    row = np.maximum(row, EVIDENCE_FLOOR)
    row /= row.sum()
    evidence[j] = row
    evidence.flags.writeable = False
    return replace(graph, evidence=evidence)


def _survival(mass: np.ndarray) -> np.ndarray:
    """S(r) = P(X >= r) over the grid, with one extra trailing S(b_max + 1) = 0."""
    k = mass.shape[0]
    s = np.empty(k + 1)
    s[:k] = np.cumsum(mass[::-1])[::-1]
    s[k] = 0.0
    return s


def min_factor_message_to_path(incoming: Sequence[Pmf]) -> Pmf:
    """Distribution of min(x_1..x_n) for independent per-link messages.

    mass(r) = prod_i S_i(r) - prod_i S_i(r+1) with survival S_i; O(n*k).
    """
    if not incoming:
        raise ValueError("need at least one incoming message")
    dom = incoming[0].domain
    for pmf in incoming[1:]:
        if pmf.domain != dom:
            raise DomainMismatch("incoming messages live on different rate grids")
    prod = np.ones(dom.k + 1)
    for pmf in incoming:
        prod *= _survival(pmf.mass)
    mass = np.clip(prod[:-1] - prod[1:], 0.0, None)
    return Pmf.normalized(dom, mass)


def min_factor_message_to_link(path_msg: Pmf, other_links: Sequence[Pmf]) -> Pmf:
    """Sum-product message from a min factor back to one of its links.

    With q the path-side message and S_o the survival product of the other
    links: out(x) = q(x) * S_o(x) + sum_{y < x} q(y) * (S_o(y) - S_o(y+1)),
    which marginalizes 1{min(x, others) = y} exactly in O(n*k). With no
    other links this reduces to q itself. Raises ValueError when the inputs
    are contradictory enough to leave no support.
    """
    dom = path_msg.domain
    for pmf in other_links:
        if pmf.domain != dom:
            raise DomainMismatch("messages live on different rate grids")
    k = dom.k
    s_o = np.ones(k + 1)
    s_o[k] = 0.0
    for pmf in other_links:
        s_o *= _survival(pmf.mass)
    pm_o = s_o[:k] - s_o[1:]
    q = path_msg.mass
    below = np.concatenate(([0.0], np.cumsum(q * pm_o)[:-1]))
    out = q * s_o[:k] + below
    return Pmf.normalized(dom, np.clip(out, 0.0, None))


@njit(cache=True)
def _bp_sweep(f2l, f2p, prior, evidence, path_ptr, path_len, link_edges, link_ptr, link_len, damping):
    """One synchronous flooding sweep over the flat edge arrays, in place.

    Recomputes variable-to-factor messages from the retained
    factor-to-variable state, then the damped factor-to-variable updates.
    Leave-one-out products use prefix/suffix arrays with per-row rescaling
    in place of logs. Returns the largest absolute message change.
    """
    E, K = f2l.shape
    M = path_ptr.shape[0]
    N = link_ptr.shape[0]

    # link variable -> min factor: prior times every other incident factor's message
    m_l2f = np.empty((E, K))
    for l in range(N):
        lo = link_ptr[l]
        d = link_len[l]
        if d == 1:
            e = link_edges[lo]
            for x in range(K):
                m_l2f[e, x] = prior[x]
        else:
            pref = np.empty((d + 1, K))
            suf = np.empty((d + 1, K))
            for x in range(K):
                pref[0, x] = 1.0
                suf[d, x] = 1.0
            for i in range(d):
                e = link_edges[lo + i]
                mx = 0.0
                for x in range(K):
                    v = pref[i, x] * f2l[e, x]
                    pref[i + 1, x] = v
                    if v > mx:
                        mx = v
                if mx > 0.0:
                    for x in range(K):
                        pref[i + 1, x] /= mx
            for i in range(d - 1, -1, -1):
                e = link_edges[lo + i]
                mx = 0.0
                for x in range(K):
                    v = suf[i + 1, x] * f2l[e, x]
                    suf[i, x] = v
                    if v > mx:
                        mx = v
                if mx > 0.0:
                    for x in range(K):
                        suf[i, x] /= mx
            for i in range(d):
                e = link_edges[lo + i]
                s = 0.0
                for x in range(K):
                    v = prior[x] * pref[i, x] * suf[i + 1, x]
                    m_l2f[e, x] = v
                    s += v
                if s > 0.0:
                    for x in range(K):
                        v = m_l2f[e, x] / s
                        m_l2f[e, x] = v if v > MESSAGE_FLOOR else MESSAGE_FLOOR
                else:
                    for x in range(K):
                        m_l2f[e, x] = 1.0 / K

    # survival of each link message, S[e, K] = 0
    S = np.empty((E, K + 1))
    for e in range(E):
        S[e, K] = 0.0
        acc = 0.0
        for x in range(K - 1, -1, -1):
            acc += m_l2f[e, x]
            S[e, x] = acc

    delta = 0.0
    tmp = np.empty(K)
    for p in range(M):
        lo = path_ptr[p]
        n = path_len[p]
        pref = np.empty((n + 1, K + 1))
        suf = np.empty((n + 1, K + 1))
        for x in range(K + 1):
            pref[0, x] = 1.0
            suf[n, x] = 1.0
        for i in range(n):
            e = lo + i
            mx = 0.0
            for x in range(K + 1):
                v = pref[i, x] * S[e, x]
                pref[i + 1, x] = v
                if v > mx:
                    mx = v
            if mx > 0.0:
                for x in range(K + 1):
                    pref[i + 1, x] /= mx
        for i in range(n - 1, -1, -1):
            e = lo + i
            mx = 0.0
            for x in range(K + 1):
                v = suf[i + 1, x] * S[e, x]
                suf[i, x] = v
                if v > mx:
                    mx = v
            if mx > 0.0:
                for x in range(K + 1):
                    suf[i, x] /= mx

        # min factor -> path variable: distribution of the links' minimum
        s = 0.0
        for x in range(K):
            v = pref[n, x] - pref[n, x + 1]
            if v < 0.0:
                v = 0.0
            tmp[x] = v
            s += v
        if s <= 0.0:
            for x in range(K):
                tmp[x] = 1.0 / K
            s = 1.0
        for x in range(K):
            v = damping * f2p[p, x] + (1.0 - damping) * (tmp[x] / s)
            if v < MESSAGE_FLOOR:
                v = MESSAGE_FLOOR
            dv = abs(v - f2p[p, x])
            if dv > delta:
                delta = dv
            f2p[p, x] = v

        # min factor -> each link variable
        for i in range(n):
            e = lo + i
            s2 = 0.0
            if n == 1:
                for x in range(K):
                    tmp[x] = evidence[p, x]
                    s2 += tmp[x]
            else:
                c = 0.0
                for x in range(K):
                    so = pref[i, x] * suf[i + 1, x]
                    so1 = pref[i, x + 1] * suf[i + 1, x + 1]
                    pm = so - so1
                    if pm < 0.0:
                        pm = 0.0
                    v = evidence[p, x] * so + c
                    c += evidence[p, x] * pm
                    tmp[x] = v
                    s2 += v
            if s2 <= 0.0:
                for x in range(K):
                    tmp[x] = 1.0 / K
                s2 = 1.0
            for x in range(K):
                v = damping * f2l[e, x] + (1.0 - damping) * (tmp[x] / s2)
                if v < MESSAGE_FLOOR:
                    v = MESSAGE_FLOOR
                dv = abs(v - f2l[e, x])
                if dv > delta:
                    delta = dv
                f2l[e, x] = v
    return delta


@dataclass(eq=False)
class BpMessages:
    """Retained factor-to-variable message state, reusable as a warm start."""

    to_link: np.ndarray  # (E, k)
    to_path: np.ndarray  # (M, k)


@dataclass(frozen=True, eq=False)
class BpResult:
    """Marginals and convergence record of one belief propagation run."""

    domain: BandwidthDomain
    path_ids: tuple[PathId, ...]
    link_ids: tuple[LinkId, ...]
    path_mass: np.ndarray  # (M, k)
    link_mass: np.ndarray  # (N, k)
    converged: bool
    iterations: int
    messages: BpMessages

    def path_marginal(self, path: PathId) -> Pmf:
        try:
            j = self.path_ids.index(path)
        except ValueError:
            raise UnknownPath(f"path {path!r} is not in the graph") from None
        return Pmf.normalized(self.domain, self.path_mass[j])

    def link_marginal(self, link: LinkId) -> Pmf:
        try:
            j = self.link_ids.index(link)
        except ValueError:
            raise KeyError(f"link {link!r} is not in the graph")
        return Pmf.normalized(self.domain, self.link_mass[j])

    @property
    def path_marginals(self) -> dict[PathId, Pmf]:
        return {p: self.path_marginal(p) for p in self.path_ids}

    @property
    def link_marginals(self) -> dict[LinkId, Pmf]:
        return {l: self.link_marginal(l) for l in self.link_ids}


def run_bp(
    graph: FactorGraph,
    schedule: BpSchedule = BpSchedule(),
    warm_start: BpMessages | None = None,
) -> BpResult:
    """Run damped synchronous belief propagation to convergence or the cap.

    Exact on tree-structured graphs once converged. Non-convergence is
    reported through the result, never raised. The warm start is copied, so
    a caller may hand back the messages of a previous result unchanged.
    """
    E = graph.n_edges
    k = graph.domain.k
    if warm_start is None:
        f2l = np.full((E, k), 1.0 / k)
        f2p = np.full((len(graph.path_ids), k), 1.0 / k)
    else:
        if warm_start.to_link.shape != (E, k) or warm_start.to_path.shape != (len(graph.path_ids), k):
            raise ValueError("warm start shape does not match the graph")
        f2l = np.array(warm_start.to_link, dtype=float)
        f2p = np.array(warm_start.to_path, dtype=float)

    converged = False
    iterations = 0
    for _ in range(schedule.max_iterations):
        delta = _bp_sweep(
            f2l,
            f2p,
            graph.prior.mass,
            graph.evidence,
            graph.path_ptr,
            graph.path_len,
            graph.link_edges,
            graph.link_ptr,
            graph.link_len,
            schedule.damping,
        )
        iterations += 1
        if delta < schedule.convergence_tol:
            converged = True
            break

    # link marginal: prior times all incident factor messages
    with np.errstate(divide="ignore"):
        log_prior = np.log(graph.prior.mass)
        per_link = np.add.reduceat(np.log(f2l)[graph.link_edges], graph.link_ptr, axis=0)
    lm = log_prior[None, :] + per_link
    lm -= lm.max(axis=1, keepdims=True)
    link_mass = np.exp(lm)
    link_mass /= link_mass.sum(axis=1, keepdims=True)

    # path marginal: min-factor message times the folded evidence
    path_mass = f2p * graph.evidence
    path_mass /= path_mass.max(axis=1, keepdims=True)
    path_mass /= path_mass.sum(axis=1, keepdims=True)

    return BpResult(
        domain=graph.domain,
        path_ids=graph.path_ids,
        link_ids=graph.link_ids,
        path_mass=path_mass,
        link_mass=link_mass,
        converged=converged,
        iterations=iterations,
        messages=BpMessages(to_link=f2l, to_path=f2p),
    )


def write_marginals_csv(result: BpResult, fh: TextIO) -> None:
    """Rows of `kind,id,rate,mass`: links first, then paths, rates ascending."""
    rates = result.domain.rates()
    fh.write("kind,id,rate,mass\n")
    for i, lid in enumerate(result.link_ids):
        for r, m in zip(rates, result.link_mass[i]):
            fh.write(f"link,{lid},{r},{m!r}\n")
    for i, pid in enumerate(result.path_ids):
        for r, m in zip(rates, result.path_mass[i]):
            fh.write(f"path,{pid},{r},{m!r}\n")
