"""Rate difference test and the bounded sigmoid observation model.

A probe at ingress rate r on a path with available bandwidth y succeeds
(z=1) when the egress rate keeps up with the ingress rate. The probability
of that outcome is modelled as a logistic curve in (r - y), clamped away
from 0 and 1 so no single noisy outcome can kill a hypothesis outright.
The slope of the curve can be fitted from training probes.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from pab.domain import BandwidthDomain, PathId

ALPHA_GRID_LO = 0.05
ALPHA_GRID_HI = 10.0
ALPHA_GRID_POINTS = 60


class InsufficientData(ValueError):
    """A path's training data is all-0 or all-1, so its bandwidth is unidentifiable."""

    def __init__(self, message: str, paths: Sequence[PathId] = ()):
        super().__init__(message)
        self.paths = tuple(paths)


@dataclass(frozen=True)
class LikelihoodModel:
    """Clamped logistic observation model P(z=1 | y, r)."""

    alpha: float = 0.5
    kappa: float = 0.05

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.kappa < 0.5:
            raise ValueError(f"kappa must lie in (0, 0.5), got {self.kappa}")


@dataclass(frozen=True)
class TrainingSample:
    """Empirical success frequency of probes at one rate on one path."""

    rate: float
    outcome_mean: float
    trials: int = 1

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= self.outcome_mean <= 1:
            raise ValueError(f"outcome_mean must lie in [0, 1], got {self.outcome_mean}")


@dataclass(frozen=True)
class FitResult:
    alpha: float
    y_hat: Mapping[PathId, int]
    unidentifiable: tuple[PathId, ...] = ()


def rdt(ingress_rate: float, egress_rate: float, epsilon: float) -> int:
    """Rate difference test: 1 iff the egress rate is within epsilon of ingress."""
    if ingress_rate < 0 or egress_rate < 0:
        raise ValueError("rates must be non-negative")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return 1 if egress_rate >= ingress_rate - epsilon else 0


def _logistic(t: np.ndarray | float) -> np.ndarray | float:
    # exp(-log(1 + exp(-t))) is stable for large |t|
    return np.exp(-np.logaddexp(0.0, -t))


def likelihood_of(model: LikelihoodModel, z: int, y: float, r: float) -> float:
    """P(z | path bandwidth y, probe rate r) under the clamped logistic model.

    The clamp is applied after the logistic, so the 0.5 crossing stays
    exactly at r = y.
    """
    if z not in (0, 1):
        raise ValueError(f"z must be 0 or 1, got {z!r}")
    p1 = float(np.clip(_logistic(-model.alpha * (r - y)), model.kappa, 1 - model.kappa))
    return p1 if z == 1 else 1.0 - p1


def likelihood_curve(model: LikelihoodModel, z: int, domain: BandwidthDomain, r: float) -> np.ndarray:
    """likelihood_of evaluated over every grid hypothesis y, as one vector."""
    if z not in (0, 1):
        raise ValueError(f"z must be 0 or 1, got {z!r}")
    y = domain.rates().astype(float)
    p1 = np.clip(_logistic(-model.alpha * (r - y)), model.kappa, 1 - model.kappa)
    return p1 if z == 1 else 1.0 - p1


def aggregate_outcomes(rows: Iterable[tuple[PathId, float, int]]) -> dict[PathId, list[TrainingSample]]:
    """Group raw (path, rate, z) probe rows into per-path TrainingSamples."""
    acc: dict[PathId, dict[float, list[int]]] = defaultdict(lambda: defaultdict(list))
    for path, rate, z in rows:
        if z not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {z!r}")
        acc[path][float(rate)].append(z)
    out: dict[PathId, list[TrainingSample]] = {}
    for path, by_rate in acc.items():
        out[path] = [
            TrainingSample(rate=rate, outcome_mean=float(np.mean(zs)), trials=len(zs))
            for rate, zs in sorted(by_rate.items())
        ]
    return out


def load_training_csv(fh: TextIO) -> dict[PathId, list[TrainingSample]]:
    """Read the `path,rate,z` training CSV (one row per probe outcome)."""
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "rate", "z"]:
        raise ValueError("training CSV must start with header: path,rate,z")
    rows: list[tuple[PathId, float, int]] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ValueError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            rows.append((row[0].strip(), float(row[1]), int(row[2])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if not rows:
        raise ValueError("training CSV contains no probe rows")
    return aggregate_outcomes(rows)


def alpha_search_grid() -> np.ndarray:
    return np.geomspace(ALPHA_GRID_LO, ALPHA_GRID_HI, ALPHA_GRID_POINTS)


def fit(samples: Mapping[PathId, Sequence[TrainingSample]], domain: BandwidthDomain) -> FitResult:
    """Jointly fit one shared slope alpha and one bandwidth y per path.

    Minimizes the trial-weighted squared error between empirical outcome
    means and the raw (unclamped) logistic curve, by grid search: log-spaced
    alpha candidates, and for each alpha an exhaustive scan of y over the
    rate grid (the per-path subproblems separate given alpha). Paths whose
    outcomes are all 0 or all 1 pin y to a grid boundary and are reported as
    unidentifiable; the fit proceeds on the rest. Recovery degrades when a
    path lacks samples on both sides of 0.5.
    """
    if not samples:
        raise InsufficientData("no training data given")
    unidentifiable = []
    usable: dict[PathId, Sequence[TrainingSample]] = {}
    for path, ss in samples.items():
        if not ss:
            unidentifiable.append(path)
        elif all(s.outcome_mean == 0.0 for s in ss) or all(s.outcome_mean == 1.0 for s in ss):
            unidentifiable.append(path)
        else:
            usable[path] = ss
    if not usable:
        raise InsufficientData(
            "every path's outcomes are all-0 or all-1; no identifiable path", paths=unidentifiable
        )

    y_grid = domain.rates().astype(float)
    alphas = alpha_search_grid()
    best_total = np.full(len(alphas), 0.0)
    best_y = {path: np.zeros(len(alphas), dtype=int) for path in usable}
    for path, ss in usable.items():
        r = np.array([s.rate for s in ss])
        m = np.array([s.outcome_mean for s in ss])
        w = np.array([float(s.trials) for s in ss])
        for i, alpha in enumerate(alphas):
            curve = _logistic(-alpha * (r[None, :] - y_grid[:, None]))  # (k, samples)
            obj = ((m[None, :] - curve) ** 2 * w[None, :]).sum(axis=1)
            j = int(np.argmin(obj))
            best_y[path][i] = j
            best_total[i] += obj[j]
    i_star = int(np.argmin(best_total))
    y_hat = {path: int(y_grid[best_y[path][i_star]]) for path in usable}
    return FitResult(alpha=float(alphas[i_star]), y_hat=y_hat, unidentifiable=tuple(unidentifiable))


def fit_objective(
    alpha: float,
    y_hat: Mapping[PathId, float],
    samples: Mapping[PathId, Sequence[TrainingSample]],
) -> float:
    """The fit's weighted MSE objective at given parameters (for diagnostics and tests)."""
    total = 0.0
    for path, ss in samples.items():
        if path not in y_hat:
            continue
        for s in ss:
            pred = float(_logistic(-alpha * (s.rate - y_hat[path])))
            total += s.trials * (s.outcome_mean - pred) ** 2
    return total
