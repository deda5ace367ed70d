"""Command line entry point: ``switchlab run|analytics|verify``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .errors import ConfigError, SwitchLabError
from .harness import ExperimentConfig, analytics_rows, run_experiment, uniform_rates
from .sfa import report_csv
from .sn import POLICIES
from .topologies import from_spec


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--topology", help="topology spec when no config is given, e.g. iq:2")
    p.add_argument("--rho", type=float, help="uniform load when no config is given")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int, help="slots per replication")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--mw-alpha", type=float)
    p.add_argument("--replications", type=int)
    p.add_argument("--workers", type=int, help="processes running replications concurrently")
    p.add_argument("--trace", help="write the per-slot CSV trace here")
    p.add_argument("--summary", help="write the JSON report here")
    p.add_argument("--csv", help="write the verdict CSV here")
    p.add_argument("--ccdf", help="write (level, log ccdf) of the total queue here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="simulate and print the summary with verdicts")
    _add_run_flags(run)
    verify = sub.add_parser("verify", help="simulate and print only the verdicts")
    _add_run_flags(verify)
    ana = sub.add_parser("analytics", help="closed-form product-form quantities as CSV")
    ana.add_argument("--topology", required=True)
    ana.add_argument("--rho", type=float, required=True)
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        base = ExperimentConfig.load(args.config)
    elif args.topology and args.rho is not None:
        base = ExperimentConfig(topology=args.topology, rho=args.rho)
    else:
        raise ConfigError({"--config": "give a config file or both --topology and --rho"})
    overrides = {
        "seed": args.seed,
        "horizon": args.horizon,
        "policy": args.policy,
        "mw_alpha": args.mw_alpha,
        "replications": args.replications,
        "workers": args.workers,
        "trace_path": args.trace,
        "summary_path": args.summary,
        "csv_path": args.csv,
        "ccdf_path": args.ccdf,
    }
    config = dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})
    config.validate()
    return config


def _print_verdicts(report) -> None:
    for v in report.verdicts:
        line = f"{v.status.upper():4s} {v.claim}: simulated={v.simulated:.6g}"
        if v.stderr == v.stderr:
            line += f" +/- {v.stderr:.3g}"
        line += f" analytic={v.analytic:.6g} ({v.tolerance})"
        if v.detail:
            line += f" [{v.detail}]"
        print(line)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "analytics":
            topo = from_spec(args.topology)
            sys.stdout.write(report_csv(analytics_rows(topo, uniform_rates(topo, args.rho))))
            return 0
        report = run_experiment(_config(args))
    except ConfigError as exc:
        for field, msg in exc.errors.items():
            print(f"config error: {field}: {msg}", file=sys.stderr)
        return 2
    except SwitchLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        summary = report.to_json()["summary"]
        summary.pop("ccdf_sum_q")
        print(json.dumps(summary, indent=2, sort_keys=True))
    _print_verdicts(report)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
