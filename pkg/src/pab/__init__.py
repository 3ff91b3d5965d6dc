"""Probabilistic available bandwidth estimation for multipath networks.

Fuses binary packet-train probe outcomes across many network paths in a
discrete factor-graph model, runs loopy belief propagation to maintain
per-path posteriors, and actively picks the next (path, rate) probe to
minimize total measurements.
"""

from pab.domain import (
    BandwidthDomain,
    EmptyTopology,
    EstimatorConfig,
    Measurement,
    PathEstimate,
    Pmf,
    Topology,
    TopologyFormatError,
    parse_topology,
    posterior_median,
    reduce_to_logical,
    shortest_credible_interval,
)
from pab.inference import BpResult, BpSchedule, FactorGraph, run_bp
from pab.learner import PolicyKind, SelectionPolicy, SessionReport, run_session
from pab.likelihood import (
    FitResult,
    InsufficientData,
    LikelihoodModel,
    TrainingSample,
    fit,
    likelihood_of,
    rdt,
)
from pab.simkit import (
    ExperimentSpec,
    GroundTruth,
    TopologyParams,
    generate_topology,
    plant_truth,
    run_experiment,
)

__all__ = [
    "BandwidthDomain",
    "BpResult",
    "BpSchedule",
    "EmptyTopology",
    "EstimatorConfig",
    "ExperimentSpec",
    "FactorGraph",
    "FitResult",
    "GroundTruth",
    "InsufficientData",
    "LikelihoodModel",
    "Measurement",
    "PathEstimate",
    "Pmf",
    "PolicyKind",
    "SelectionPolicy",
    "SessionReport",
    "Topology",
    "TopologyFormatError",
    "TopologyParams",
    "TrainingSample",
    "fit",
    "generate_topology",
    "likelihood_of",
    "parse_topology",
    "plant_truth",
    "posterior_median",
    "rdt",
    "reduce_to_logical",
    "run_bp",
    "run_experiment",
    "run_session",
    "shortest_credible_interval",
]

__version__ = "0.1.0"
