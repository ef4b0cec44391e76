"""Command line surface.

Subcommands: generate, run, sweep, audit, verify, report.
Exit codes: 0 success, 2 invalid configuration, 3 convergence failure,
4 integrity violation found by audit, 1 any other error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash, parse_and_validate_config
from .errors import (
    ConfigurationError,
    ConvergenceError,
    OutputLockError,
    SizeGuardError,
    SofaError,
)
from .integrity import build_integrity_report
from .mechanism import closed_form_totals, run_fixed_point
from .metrics import MetricsReport, build_metrics_report, gini, lorenz, top_share
from .outputs import (
    INTEGRITY_JSON,
    METRICS_JSON,
    _json_text,
    integrity_json_dict,
    read_funding_csv,
    read_transfers_csv,
    write_outputs,
    write_sweep_outputs,
)
from .policy import apply_group_multiplier, resolve_fractions
from .population import load_community, save_community
from .simulation import PriorView, propose_plans, run_scenario, sweep
from .mechanism import base_vector
from .integrity import detect_conflicts

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_INTEGRITY = 4
EXIT_ERROR = 1

VERIFY_AGREEMENT = 1e-8  # allowed infinity-norm gap, relative to the budget


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="scenario configuration (JSON)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", type=Path, help="output directory")
    parser.add_argument("--tolerance", type=float, help="override the convergence tolerance")
    parser.add_argument("--max-iter", type=int, help="override the iteration cap")


def _load_config(args):
    if args.config is None:
        raise ConfigurationError([("", "--config is required for this subcommand")])
    config = parse_and_validate_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    policy = config.policy
    if args.tolerance is not None:
        policy = replace(policy, tolerance=args.tolerance)
    if args.max_iter is not None:
        policy = replace(policy, max_iter=args.max_iter)
    if policy is not config.policy:
        config = replace(config, policy=policy)
    return config


def _require_out_dir(args) -> Path:
    if args.out_dir is None:
        raise ConfigurationError([("", "--out-dir is required for this subcommand")])
    return args.out_dir


def cmd_generate(args) -> int:
    config = _load_config(args)
    if config.community_spec is None:
        raise ConfigurationError([("/community", "generate requires a community.generate spec")])
    out = _require_out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    community = config.load_or_generate_community()
    path = out / "community.json"
    save_community(community, path)
    print(f"wrote {path} ({len(community)} agents, {len(community.coauthor_edges)} coauthor edges)")
    return EXIT_OK


def cmd_run(args) -> int:
    from .outputs import _utcnow

    config = _load_config(args)
    out = _require_out_dir(args)
    started = _utcnow()
    result = run_scenario(config)
    if not result.completed:
        print(f"convergence failure: {result.failure_reason}", file=sys.stderr)
        return EXIT_CONVERGENCE
    manifest = write_outputs(result, out, config_hash=config_hash(config), started_at=started)
    print(f"wrote {len(manifest.outputs) + 1} files to {out}")
    print(f"gini(retained) = {result.metrics.gini:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    out = _require_out_dir(args)
    try:
        fractions = [float(x) for x in args.fractions.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigurationError([("/fractions", f"cannot parse {args.fractions!r}")]) from None
    result = sweep(config, fractions)
    write_sweep_outputs(result, out)
    failed = [p for p in result.points if p.metrics is None]
    for fraction, value in result.gini_by_fraction():
        print(f"f={fraction:.3f}  gini={value:.6f}")
    for point in failed:
        print(f"f={point.fraction:.3f}  error: {point.error}", file=sys.stderr)
    return EXIT_CONVERGENCE if failed else EXIT_OK


def cmd_audit(args) -> int:
    ledger = read_transfers_csv(args.transfers)
    community = load_community(args.community)
    if args.config is not None:
        config = parse_and_validate_config(args.config)
        rules = config.policy.coi_rules
        thresholds = config.policy.cartel_thresholds
        evaluation_year = config.policy.evaluation_year
    else:
        from .integrity import CartelThresholds, CoiRules

        rules, thresholds, evaluation_year = CoiRules(), CartelThresholds(), 2024
    conflicts = detect_conflicts(community, rules, evaluation_year)
    report = build_integrity_report(ledger, conflicts, thresholds)
    out = args.out_dir or Path(args.transfers).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / INTEGRITY_JSON).write_text(_json_text(integrity_json_dict(report)), encoding="utf-8")
    print(
        f"audited {report.totals['n_transfers']} transfers: "
        f"{report.totals['n_conflicted_transfers']} conflicted, "
        f"{report.totals['n_cartel_flags']} cartel flag(s), scan={report.cartel_scan}"
    )
    return EXIT_OK if report.clean else EXIT_INTEGRITY


def cmd_verify(args) -> int:
    config = _load_config(args)
    tolerance = args.tolerance if args.tolerance is not None else 1e-12
    community = config.load_or_generate_community()
    policy = config.policy
    conflicts = detect_conflicts(community, policy.coi_rules, policy.evaluation_year)
    fractions = resolve_fractions(community, policy)
    base = base_vector(
        policy.total_budget, community, policy.public_fraction, policy.public_pref_mapping()
    )
    plan = propose_plans(
        config.strategy,
        community,
        PriorView(totals=base, round_index=1),
        conflicts,
        config.seed,
        policy.evaluation_year,
        policy.fallback_uniform_domain,
    )
    plan = apply_group_multiplier(plan, community, policy.group_multipliers)
    exact = closed_form_totals(plan, fractions, base, community)
    iterated = run_fixed_point(plan, fractions, base, community, tolerance, policy.max_iter)
    if not iterated.converged:
        print(f"fixed point did not converge within {policy.max_iter} iterations", file=sys.stderr)
        return EXIT_CONVERGENCE
    gap = float(np.max(np.abs(iterated.totals - exact))) / policy.total_budget
    ok = gap <= VERIFY_AGREEMENT
    print(
        f"fixed point vs dense solve: max |gap| = {gap:.3e} * budget "
        f"({iterated.iterations} iterations) -> {'OK' if ok else 'MISMATCH'}"
    )
    return EXIT_OK if ok else EXIT_ERROR


def cmd_report(args) -> int:
    rounds = read_funding_csv(args.funding)
    if not rounds:
        raise ConfigurationError([("", f"{args.funding} contains no data rows")])
    last = rounds[max(rounds)]
    ids = sorted(last)
    kept = np.array([last[a][1] for a in ids], dtype=float)
    if args.community is not None:
        community = load_community(args.community)
        order = [aid for aid in ids if aid in community.pos]
        if len(order) != len(community):
            raise ConfigurationError([("", "funding csv and community disagree on agents")])
        aligned = np.zeros(len(community))
        for aid in order:
            aligned[community.pos[aid]] = last[aid][1]
        budget = float(sum(v[1] for v in last.values()))
        report = build_metrics_report(aligned, community, budget, convergence={})
    else:
        report = MetricsReport(
            gini=gini(kept),
            lorenz=tuple(lorenz(kept)),
            top_shares={float(k): top_share(kept, k) for k in (1, 5, 10, 25)},
            per_group_shares={},
            convergence={},
            baseline_equal_split=(),
        )
    out = args.out_dir or Path(args.funding).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / METRICS_JSON).write_text(_json_text(report.to_json_dict()), encoding="utf-8")
    print(f"gini(retained) = {report.gini:.6f} over {len(kept)} agents, round {max(rounds)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sofasim",
        description="Simulate self-organized fund allocation scenarios and audit their outputs.",
    )
    parser.add_argument("--version", action="version", version=f"sofasim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a community file from a config")
    _common_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one scenario and write its output files")
    _common_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="re-run a scenario across donation fractions")
    _common_flags(p)
    p.add_argument("--fractions", required=True, help="comma-separated fractions in [0, 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="audit a transfers.csv for conflicts and cartels")
    _common_flags(p)
    p.add_argument("--transfers", type=Path, required=True)
    p.add_argument("--community", type=Path, required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify", help="cross-check the fixed point against a dense solve")
    _common_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="recompute metrics from a stored funding csv")
    _common_flags(p)
    p.add_argument("--funding", type=Path, required=True)
    p.add_argument("--community", type=Path)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        for pointer, message in exc.issues:
            print(f"config error at {pointer or '/'}: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except SizeGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OutputLockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SofaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
