########################
# Command Line          #
########################

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any, Dict, List, Optional, Sequence

from app.audit import any_failed, verdict_table
from app.exceptions import (AdaptiveInferenceError, AuditError, ConfigurationError, ContractViolation,
                            DesignError, InferenceError, NuisanceError, PlanError, ScoringError,
                            ValidationError)
from app.lab import (GRIDS, INFER_MODES, INFER_VARIANTS, PUBLISHED_FIGURES, PUBLISHED_TABLES,
                     InferenceLab, PlanSpec)
from app.lab_config import LabConfig
from app.mc_engine import McTable
from app.nuisance import NuisanceConfig
from app.observers import AutoSaveObserver, LoggingObserver

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_INPUT = 4


def parse_params(pairs: Optional[Sequence[str]]) -> Dict[str, Any]:
    """
    Turn ``KEY=VALUE`` design overrides into a dict; values are read as
    JSON when possible (numbers, lists, booleans) and as strings otherwise.

    Raises:
        ConfigurationError: If a pair has no '='.
    """
    params: Dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition('=')
        if not sep or not key:
            raise ConfigurationError(f"Design parameter must look like KEY=VALUE, got {pair!r}")
        try:
            params[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            params[key.strip()] = raw
    return params


def _add_plan_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('forward plan (default: one full block)')
    group.add_argument('--plan', type=Path, help="Saved plan JSON")
    group.add_argument('--blocks', type=int, help="K equal blocks; the first is burn-in")
    group.add_argument('--burn-in', type=int, help="Burn-in length n0")
    group.add_argument('--block-size', type=int, help="Block size after the burn-in")


def _add_run_arguments(parser: argparse.ArgumentParser, default: Any = None) -> None:
    parser.add_argument('--seed', type=int, default=default, help="Master seed (overrides SNAIPW_SEED)")
    parser.add_argument('--workers', type=int, default=default, help="Parallel workers for Monte Carlo runs")
    parser.add_argument('--alpha', type=float, default=default, help="Interval level")
    parser.add_argument('--critical', choices=('z', 't'), default=default, help="Critical value of SN intervals")
    parser.add_argument('--epsilon', type=float, default=default,
                        help="Overlap threshold for audits (default: the design's, else SNAIPW_EPSILON)")


def _add_subcommand(sub, name: str, help_text: str) -> argparse.ArgumentParser:
    parser = sub.add_parser(name, help=help_text)
    # Suppressed defaults keep a value given before the subcommand
    _add_run_arguments(parser, default=argparse.SUPPRESS)
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='snaipw',
        description="Self-normalized AIPW inference for adaptive experiments",
    )
    _add_run_arguments(parser)
    parser.add_argument('--out', type=Path, help="Base directory for out/ and logs/")
    parser.add_argument('--name', help="Run directory name (default: timestamp)")
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = _add_subcommand(sub, 'simulate', "Monte Carlo coverage table")
    simulate.add_argument('--design', required=True)
    simulate.add_argument('--n', type=int, nargs='+', required=True)
    simulate.add_argument('--R', type=int, dest='replications')
    simulate.add_argument('--methods', nargs='+')
    simulate.add_argument('--param', action='append', metavar='KEY=VALUE')
    simulate.add_argument('--reference', help="Method to report relative length and V_hat against")
    simulate.add_argument('--histogram', type=int, metavar='BINS',
                          help="Also write the variance-ratio histogram (design A, first n)")

    infer = _add_subcommand(sub, 'infer', "Estimate and interval from a logged experiment")
    infer.add_argument('--log', type=Path, required=True)
    infer.add_argument('--format', choices=('jsonl', 'csv'))
    _add_plan_arguments(infer)
    infer.add_argument('--mode', choices=INFER_MODES, default='forward')
    infer.add_argument('--feature-map', default='raw')
    infer.add_argument('--ridge', type=float, default=1e-8)
    infer.add_argument('--clamp', type=float, nargs=2, metavar=('LO', 'HI'))
    infer.add_argument('--variant', choices=INFER_VARIANTS, default='sn')
    infer.add_argument('--v-fix', type=float)
    infer.add_argument('--theta0', type=float)
    infer.add_argument('--enforce-contract', action='store_true')
    infer.add_argument('--horizon', type=int, help="Declared horizon n")

    audit = _add_subcommand(sub, 'audit', "Check a log and fit ledger against the logging contract")
    audit.add_argument('--log', type=Path, required=True)
    audit.add_argument('--format', choices=('jsonl', 'csv'))
    audit.add_argument('--ledger', type=Path, required=True)
    _add_plan_arguments(audit)
    audit.add_argument('--horizon', type=int, help="Declared horizon n")
    audit.add_argument('--declared-plan', type=Path)

    reproduce = _add_subcommand(sub, 'reproduce', "Run a bundled published grid")
    target = reproduce.add_mutually_exclusive_group(required=True)
    target.add_argument('--grid', choices=sorted(GRIDS))
    target.add_argument('--table', type=int, choices=sorted(PUBLISHED_TABLES),
                        help="Published table number")
    target.add_argument('--figure', type=int, choices=sorted(PUBLISHED_FIGURES),
                        help="Published figure number")
    reproduce.add_argument('--R', type=int, dest='replications')

    dump = _add_subcommand(sub, 'dump', "Write one simulated trial for infer and audit")
    dump.add_argument('--design', required=True)
    dump.add_argument('--n', type=int, required=True)
    dump.add_argument('--replication', type=int, default=0)
    dump.add_argument('--param', action='append', metavar='KEY=VALUE')
    return parser


def _config_from(args: argparse.Namespace) -> LabConfig:
    return LabConfig(
        base_dir=args.out.resolve() if args.out else None,
        master_seed=args.seed,
        workers=args.workers,
        alpha=args.alpha,
        critical=args.critical,
        epsilon=args.epsilon,
    )


def _grid_name(args: argparse.Namespace) -> str:
    if args.table is not None:
        return PUBLISHED_TABLES[args.table]
    if args.figure is not None:
        return PUBLISHED_FIGURES[args.figure]
    return args.grid


def _plan_spec(args: argparse.Namespace) -> PlanSpec:
    return PlanSpec(path=args.plan, blocks=args.blocks, burn_in=args.burn_in, block_size=args.block_size)


def _run(args: argparse.Namespace) -> int:
    lab = InferenceLab(_config_from(args))
    lab.add_observer(LoggingObserver())
    lab.add_observer(AutoSaveObserver(lab))

    if args.command == 'simulate':
        table, run_dir = lab.simulate(args.design, args.n, args.methods, args.replications,
                                      parse_params(args.param), args.name, args.reference)
        if args.histogram:
            lab.histogram(args.n[0], args.replications, args.histogram, run_dir=run_dir)
        print(table.render())
        print(f"Results written to {run_dir}")
        return EXIT_OK

    if args.command == 'reproduce':
        result, run_dir = lab.reproduce(_grid_name(args), args.replications, args.name)
        if isinstance(result, McTable):
            print(result.render())
        print(f"Results written to {run_dir}")
        return EXIT_OK

    if args.command == 'dump':
        run_dir = lab.dump(args.design, args.n, args.replication, parse_params(args.param), args.name)
        print(f"Trial written to {run_dir}")
        return EXIT_OK

    if args.command == 'infer':
        nuisance = NuisanceConfig(feature_map=args.feature_map, ridge_lambda=args.ridge,
                                  clamp=tuple(args.clamp) if args.clamp else None)
        report, qv, run_dir = lab.infer(args.log, _plan_spec(args), args.mode, nuisance, args.variant,
                                        args.v_fix, args.theta0, args.enforce_contract, args.horizon,
                                        args.format, epsilon=args.epsilon, name=args.name)
        print(report.summary())
        if qv is not None:
            print(f"Q={qv.q_t:.6g} S={qv.s_t:.6g} identity residual={qv.identity_residual:.3g}")
        print(f"Report written to {run_dir}")
        return EXIT_OK

    verdicts, run_dir = lab.audit(args.log, args.ledger, _plan_spec(args), args.horizon,
                                  args.declared_plan, args.format,
                                  epsilon=args.epsilon, name=args.name)
    print(verdict_table(verdicts))
    print(f"Audit written to {run_dir}")
    return EXIT_CONTRACT if any_failed(verdicts) else EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and map errors to exit codes:
    2 for configuration and design errors, 3 when the logging contract
    blocks a result, 4 for unreadable inputs.
    """
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ContractViolation as e:
        print(f"Contract violation: {e}", file=sys.stderr)
        if e.verdicts:
            print(verdict_table(e.verdicts), file=sys.stderr)
        return EXIT_CONTRACT
    except (ValidationError, PlanError, AuditError, OSError) as e:
        logging.error(f"Unreadable input: {e}")
        print(f"Input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigurationError, DesignError, InferenceError, NuisanceError, ScoringError) as e:
        logging.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AdaptiveInferenceError as e:  # pragma: no cover
        logging.error(f"Unexpected error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
