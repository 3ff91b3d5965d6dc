"""Command line front end.

Subcommands: simulate (policy-comparison experiments against a planted
ground truth), estimate (drive live probes from the active learner),
fit (calibrate the outcome model from probe logs), probe (one-shot sender
or a listening receiver), topo (inspect or generate topology files).

Exit codes: 0 success, 1 runtime failure (unreachable receiver, failed
paths, unidentifiable training data), 2 usage or configuration errors.
Output files land in --output-dir, falling back to an output_dir key in the
spec file, then the PAB_OUTPUT_DIR environment variable, then the working
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from pab.domain import (
    BandwidthDomain,
    EstimatorConfig,
    PathId,
    load_topology,
    format_topology,
    reduce_to_logical,
)
from pab.learner import SelectionPolicy, run_session
from pab.likelihood import (
    InsufficientData,
    LikelihoodModel,
    fit,
    load_training_csv,
)
from pab.prober import (
    AllTrainsInvalid,
    MissingArrival,
    ProbeReceiver,
    ProbeSpec,
    ProbeTimeout,
    probe_once,
)
from pab.simkit import (
    ExperimentSpecError,
    InfeasibleParams,
    TopologyParams,
    generate_topology,
    load_experiment_spec,
    run_experiment,
)


@dataclass(frozen=True)
class CliConfig:
    """Parsed invocation context shared by the subcommands."""

    subcommand: str
    config_path: str | None = None
    overrides: tuple[str, ...] = ()
    output_dir: str | None = None
    seed: int | None = None
    verbosity: int = 0


def _resolve_output_dir(cfg: CliConfig, config_value: str | None = None) -> Path:
    for cand in (cfg.output_dir, config_value, os.environ.get("PAB_OUTPUT_DIR")):
        if cand:
            out = Path(cand)
            break
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _load_endpoints(path: str) -> dict[PathId, tuple[str, int]]:
    endpoints: dict[PathId, tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<path> <host:port>'")
            pid, dest = parts
            if pid in endpoints:
                raise ValueError(f"{path}:{lineno}: duplicate path {pid!r}")
            endpoints[pid] = _parse_hostport(dest)
    if not endpoints:
        raise ValueError(f"{path}: no endpoints")
    return endpoints


def cmd_simulate(cfg: CliConfig, args: argparse.Namespace) -> int:
    spec, extras = load_experiment_spec(args.spec, cfg.overrides)
    if cfg.seed is not None:
        spec = dataclasses.replace(spec, seed=cfg.seed)
    out = _resolve_output_dir(cfg, extras.get("output_dir"))

    progress = None
    if cfg.verbosity:
        def progress(rec):
            print(
                f"trial {rec.trial} {rec.policy}: {rec.measurements} measurements, "
                f"accuracy {rec.accuracy:.3f}, {rec.termination}"
            )

    report = run_experiment(spec, progress)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        report.write_json(fh)
    with open(out / "trials.csv", "w", encoding="utf-8") as fh:
        report.write_trials_csv(fh)
    with open(out / "scatter.csv", "w", encoding="utf-8") as fh:
        report.write_scatter_csv(fh)

    for kind, agg in report.aggregates().items():
        print(
            f"{kind}: {agg['mean_measurements_per_path']:.2f} measurements/path, "
            f"accuracy {agg['mean_accuracy']:.3f} "
            f"({agg['mean_measurements']:.1f} total over {spec.trials} trials)"
        )
    print(f"wrote report.json, trials.csv, scatter.csv to {out}")
    if report.interrupted:
        print("interrupted: partial results written", file=sys.stderr)
        return 1
    return 0


def cmd_estimate(cfg: CliConfig, args: argparse.Namespace) -> int:
    raw = load_topology(args.topology)
    topo = reduce_to_logical([raw.incidence[p] for p in raw.paths], raw.paths)
    endpoints = _load_endpoints(args.endpoints)
    missing = [p for p in topo.paths if p not in endpoints]
    if missing:
        print(f"error: no endpoint for path {missing[0]!r}", file=sys.stderr)
        return 2
    unknown = sorted(set(endpoints) - set(topo.paths))
    if unknown:
        print(f"error: endpoint for unknown path {unknown[0]!r}", file=sys.stderr)
        return 2

    config = EstimatorConfig(
        domain=BandwidthDomain(b_min=args.b_min, b_max=args.b_max),
        epsilon=args.epsilon,
        delta=args.delta,
        eta=args.eta,
        beta=args.beta,
        max_measurements=args.max_measurements,
    )
    model = LikelihoodModel(alpha=args.alpha, kappa=args.kappa)
    policy = SelectionPolicy(kind=args.policy, rng_seed=cfg.seed or 0)

    def measurer(path: PathId, rate: int) -> int:
        host, port = endpoints[path]
        spec = ProbeSpec(
            rate=float(rate),
            trains=args.trains,
            packets_per_train=args.packets,
            packet_size=args.size,
        )
        return probe_once(host, port, spec, path, config.epsilon).measurement.outcome

    report = run_session(topo, config, model, policy, measurer)

    out = _resolve_output_dir(cfg)
    with open(out / "session.json", "w", encoding="utf-8") as fh:
        report.write_json(fh)
    for path in report.path_ids:
        e = report.estimates[path]
        mark = " satisfied" if e.satisfied else ""
        print(f"{path}: [{e.lb}, {e.ub}] Mbps, width {e.width:g}, mass {e.mass_in_interval:.3f}{mark}")
    print(f"done: {report.termination} after {report.measurement_count} measurements")
    for msg in report.failures:
        print(f"warning: {msg}", file=sys.stderr)
    if report.termination == "paths_failed":
        return 1
    return 0


def cmd_fit(cfg: CliConfig, args: argparse.Namespace) -> int:
    with open(args.csv, "r", encoding="utf-8", newline="") as fh:
        samples = load_training_csv(fh)
    domain = BandwidthDomain(b_min=args.b_min, b_max=args.b_max)
    try:
        result = fit(samples, domain)
    except InsufficientData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(f"alpha {result.alpha:.4g}")
    for path in sorted(result.y_hat):
        print(f"{path}: y {result.y_hat[path]}")
    out = _resolve_output_dir(cfg)
    with open(out / "model.txt", "w", encoding="utf-8") as fh:
        fh.write(f"alpha={result.alpha!r}\n")
        fh.write(f"kappa={args.kappa!r}\n")
        for path in sorted(result.y_hat):
            fh.write(f"y.{path}={result.y_hat[path]}\n")
    if result.unidentifiable:
        for path in result.unidentifiable:
            print(
                f"warning: {path}: outcomes never vary, bandwidth unidentifiable",
                file=sys.stderr,
            )
        return 1
    return 0


def cmd_probe(cfg: CliConfig, args: argparse.Namespace) -> int:
    if args.listen is not None:
        receiver = ProbeReceiver(host=args.host, port=args.listen, shape_mbps=args.shape_mbps)
        print(f"ready {receiver.port}", flush=True)
        try:
            while True:
                receiver.run_once()
        except KeyboardInterrupt:
            return 0
        finally:
            receiver.close()

    if args.dest is None or args.rate is None:
        print("error: --dest and --rate are required unless --listen is given", file=sys.stderr)
        return 2
    host, port = _parse_hostport(args.dest)
    spec = ProbeSpec(
        rate=args.rate,
        trains=args.trains,
        packets_per_train=args.packets,
        packet_size=args.size,
    )
    result = probe_once(host, port, spec, args.path, args.epsilon)
    if args.json:
        print(
            json.dumps(
                {
                    "path": result.measurement.path,
                    "rate": result.measurement.rate,
                    "outcome": result.measurement.outcome,
                    "egress_mbps": result.egress_mbps,
                    "train_rates": list(result.train_rates),
                },
                sort_keys=True,
            )
        )
    else:
        m = result.measurement
        print(
            f"{m.path}: sent {spec.rate:g} Mbps, egress {result.egress_mbps:.2f} Mbps "
            f"({len(result.train_rates)}/{spec.trains} trains), outcome {m.outcome}"
        )
    return 0


def cmd_topo(cfg: CliConfig, args: argparse.Namespace) -> int:
    if args.generate is not None:
        params = TopologyParams(
            nodes=args.nodes,
            extra_links=args.extra_links,
            paths=args.paths,
            fixture=args.fixture,
        )
        topo = generate_topology(params, cfg.seed or 0)
        with open(args.generate, "w", encoding="utf-8") as fh:
            fh.write(format_topology(topo))
        print(f"wrote {topo.n_links} links, {topo.n_paths} paths to {args.generate}")
        return 0

    if args.file is None:
        print("error: give a topology file to inspect, or --generate", file=sys.stderr)
        return 2
    raw = load_topology(args.file)
    topo = reduce_to_logical([raw.incidence[p] for p in raw.paths], raw.paths)
    print(f"declared: {raw.n_links} links, {raw.n_paths} paths")
    print(f"logical:  {topo.n_links} links, {topo.n_paths} paths")
    for p in topo.paths:
        print(f"  {p}: {' '.join(topo.incidence[p])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pab",
        description="Probabilistic available-bandwidth estimation across multiple paths.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="run a policy-comparison experiment from a spec file")
    p.add_argument("--spec", required=True, help="experiment spec file (key=value lines)")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a spec key")
    p.add_argument("--output-dir", default=None)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate live paths by driving the prober")
    p.add_argument("--topology", required=True, help="topology file")
    p.add_argument("--endpoints", required=True, help="file of '<path> <host:port>' lines")
    p.add_argument("--policy", choices=["RR", "SEQ", "WE", "WCI"], default="WCI")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--b-min", type=int, default=1)
    p.add_argument("--b-max", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=5.0)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--eta", type=float, default=0.95)
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--max-measurements", type=int, default=10000)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--kappa", type=float, default=0.05)
    p.add_argument("--trains", type=int, default=3)
    p.add_argument("--packets", type=int, default=25)
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--output-dir", default=None)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fit", help="fit the outcome model to a probe log CSV")
    p.add_argument("csv", help="CSV with header path,rate,z")
    p.add_argument("--b-min", type=int, default=1)
    p.add_argument("--b-max", type=int, default=100)
    p.add_argument("--kappa", type=float, default=0.05, help="recorded in the model file for later sessions")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("probe", help="send one probe, or listen as a receiver")
    p.add_argument("--dest", default=None, help="receiver host:port")
    p.add_argument("--rate", type=float, default=None, help="send rate in Mbps")
    p.add_argument("--trains", type=int, default=3)
    p.add_argument("--packets", type=int, default=25)
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=5.0)
    p.add_argument("--path", default="p0", help="path id to stamp on the measurement")
    p.add_argument("--json", action="store_true")
    p.add_argument("--listen", type=int, default=None, metavar="PORT", help="run a receiver (0 picks a port)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--shape-mbps", type=float, default=None, help="emulate a bottleneck of this bandwidth")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("topo", help="inspect a topology file, or generate one")
    p.add_argument("file", nargs="?", default=None)
    p.add_argument("--generate", default=None, metavar="PATH", help="write a generated topology here")
    p.add_argument("--nodes", type=int, default=12)
    p.add_argument("--extra-links", type=int, default=3)
    p.add_argument("--paths", type=int, default=8)
    p.add_argument("--fixture", default=None, help="named fixture, e.g. shared_trunk")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_topo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    cfg = CliConfig(
        subcommand=args.cmd,
        config_path=(
            getattr(args, "spec", None)
            or getattr(args, "topology", None)
            or getattr(args, "csv", None)
            or getattr(args, "file", None)
        ),
        overrides=tuple(getattr(args, "set", ()) or ()),
        output_dir=getattr(args, "output_dir", None),
        seed=getattr(args, "seed", None),
        verbosity=getattr(args, "verbose", 0),
    )
    try:
        return args.func(cfg, args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ProbeTimeout, AllTrainsInvalid, MissingArrival) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ExperimentSpecError, InfeasibleParams, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
