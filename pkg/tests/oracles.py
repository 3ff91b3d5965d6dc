"""Brute-force reference implementations.

Everything here is deliberately slow and obvious: exhaustive enumeration
over joint assignments, O(k^2) interval scans. Tests compare the fast code
against these on instances small enough for the enumeration to finish.
"""

from __future__ import annotations

import itertools

import numpy as np


def min_to_path_brute(incoming: list[np.ndarray]) -> np.ndarray:
    """P(min of independent variables = r) by full joint enumeration."""
    k = len(incoming[0])
    out = np.zeros(k)
    for combo in itertools.product(range(k), repeat=len(incoming)):
        p = 1.0
        for arr, idx in zip(incoming, combo):
            p *= arr[idx]
        out[min(combo)] += p
    return out / out.sum()


def min_to_link_brute(path_msg: np.ndarray, others: list[np.ndarray]) -> np.ndarray:
    """Message from a min factor back to one link, by enumeration.

    out(x) = sum over assignments of the other links of
             (product of their messages) * path_msg[min(x, others)].
    """
    k = len(path_msg)
    out = np.zeros(k)
    for x in range(k):
        if not others:
            out[x] = path_msg[x]
            continue
        total = 0.0
        for combo in itertools.product(range(k), repeat=len(others)):
            p = 1.0
            for arr, idx in zip(others, combo):
                p *= arr[idx]
            total += p * path_msg[min(x, min(combo))]
        out[x] = total
    return out / out.sum()


def joint_marginals_brute(topology, k: int, prior: np.ndarray, evidence: dict):
    """Exact link and path marginals by enumerating every link assignment.

    evidence maps path id to an array over the grid: the folded product of
    its measurement likelihoods (any positive scaling). Weight of a joint
    assignment = prod prior(x_l) * prod_p evidence_p(min over the path).
    """
    links = list(topology.links)
    pos = {l: i for i, l in enumerate(links)}
    link_m = {l: np.zeros(k) for l in links}
    path_m = {p: np.zeros(k) for p in topology.paths}
    for combo in itertools.product(range(k), repeat=len(links)):
        w = 1.0
        for idx in combo:
            w *= prior[idx]
        ys = {}
        for p in topology.paths:
            y = min(combo[pos[l]] for l in topology.incidence[p])
            ys[p] = y
            w *= evidence[p][y]
        if w == 0.0:
            continue
        for l, idx in zip(links, combo):
            link_m[l][idx] += w
        for p, y in ys.items():
            path_m[p][y] += w
    for d in (link_m, path_m):
        for key in d:
            s = d[key].sum()
            assert s > 0, "joint enumeration lost all mass"
            d[key] /= s
    return link_m, path_m


def sci_brute(mass: np.ndarray, eta: float, slack: float = 1e-9):
    """Shortest credible interval by scanning all O(k^2) windows.

    Tie order: least width, then most mass, then smallest lower index.
    Returns (lo, hi, mass) as 0-based grid indices.
    """
    k = len(mass)
    csum = np.concatenate(([0.0], np.cumsum(mass)))
    best = None
    for lo in range(k):
        for hi in range(lo, k):
            m = csum[hi + 1] - csum[lo]
            if m >= eta - slack:
                cand = (hi - lo, -m, lo)
                if best is None or cand < best:
                    best = cand
                break  # wider windows at this lo only add width
    assert best is not None, "no window reaches eta"
    width, neg_mass, lo = best
    return lo, lo + width, -neg_mass


def min_of_pmfs_brute(pmfs: list[np.ndarray]) -> np.ndarray:
    return min_to_path_brute(pmfs)
