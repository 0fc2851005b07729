"""kmtq CLI - main entry point."""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

from kmtq.config import CORRECTIONS, KINDS, METRICS, default_config, load_config
from kmtq.display import format_fit, format_records, format_summary
from kmtq.harness import fit_rate, load_records, run_coupled_replication, run_experiment
from kmtq.storage import KmtqError, ValidationError

try:
    from importlib.metadata import version as _meta_version
    __version__ = _meta_version("kmtq")
except Exception:
    __version__ = "0.0.0"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

LADDER_KINDS = tuple(k for k in KINDS if k.startswith("couple-") or k == "kmt-empirical")


def load_settings(args, kind: str):
    """Config file (or the kind's defaults) with command-line overrides applied."""
    cfg = load_config(Path(args.config)) if args.config else default_config(kind)
    if getattr(args, "kind", None) and cfg.kind != args.kind:
        raise ValidationError(f"--kind {args.kind} conflicts with config kind {cfg.kind}")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            raise ValidationError(f"--jobs must be >= 1, got {args.jobs}")
        changes["jobs"] = args.jobs
    if args.out is not None:
        changes["out"] = Path(args.out)
    if getattr(args, "ladder", None):
        ladder = tuple(args.ladder)
        if min(ladder) < 2 or any(b <= a for a, b in zip(ladder, ladder[1:], strict=False)):
            raise ValidationError("ladder must be strictly increasing with entries >= 2")
        changes["ladder"] = ladder
    if getattr(args, "reps", None) is not None:
        if args.reps < 1:
            raise ValidationError(f"--reps must be >= 1, got {args.reps}")
        changes["replications"] = args.reps
    return replace(cfg, **changes)


def _finish(report, config) -> None:
    print(format_summary(config, report), end="")
    sys.exit(EXIT_OK if report.passed else EXIT_FAIL)


def cmd_simulate(args):
    """One coupled sample and its queue trace."""
    config = load_settings(args, "simulate-only")
    config = replace(config, kind="simulate-only")
    if args.n is not None:
        config = replace(config, ladder=(args.n,))
    report = run_experiment(config, args.verbose)
    if args.verbose:
        for path in report.files:
            print(path)
    _finish(report, config)


def cmd_couple(args):
    """One replication at one n; prints its records."""
    config = load_settings(args, "couple-arrival")
    metrics = tuple(args.metric) if args.metric else config.metrics
    n = args.n if args.n is not None else config.ladder[0]
    records = run_coupled_replication(config, n, args.rep, metrics)
    print(format_records(records))


def cmd_ladder(args):
    """Coupled-error ladder with rate fits."""
    config = load_settings(args, args.kind or "couple-arrival")
    if config.kind not in LADDER_KINDS:
        raise ValidationError(f"Invalid kind for ladder: {config.kind}")
    _finish(run_experiment(config, args.verbose), config)


def cmd_validate_bounds(args):
    """Bound-domination checks."""
    config = replace(load_settings(args, "validate-bounds"), kind="validate-bounds")
    _finish(run_experiment(config, args.verbose), config)


def cmd_fit_rate(args):
    """Re-fit a records.csv."""
    records = load_records(Path(args.records))
    fit = fit_rate(records, args.metric, args.correction)
    print(format_fit(fit))


def cmd_help(args, parser):
    """Show help."""
    if args.command_name:
        subparsers_actions = [
            action for action in parser._actions
            if isinstance(action, argparse._SubParsersAction)
        ]
        if subparsers_actions:
            subparsers = subparsers_actions[0]
            if args.command_name in subparsers.choices:
                subparsers.choices[args.command_name].print_help()
            else:
                print(f"Unknown command: {args.command_name}", file=sys.stderr)
                sys.exit(EXIT_FAIL)
    else:
        parser.print_help()


def add_run_flags(subparser, ladder=False):
    """Add the shared experiment flags to a subparser.

    Args:
        subparser: The argparse subparser to add flags to
        ladder: If True, also add --ladder and --reps
    """
    subparser.add_argument("--config", help="TOML experiment file")
    subparser.add_argument("--seed", type=int, help="Master seed")
    subparser.add_argument("--jobs", type=int, help="Worker processes (default: 1)")
    subparser.add_argument("--out", help="Output directory")
    subparser.add_argument("--verbose", "-v", action="store_true", help="Progress on stderr")
    if ladder:
        subparser.add_argument("--ladder", type=int, nargs="+", help="Population sizes n")
        subparser.add_argument("--reps", type=int, help="Replications per n")


def main():
    """Main CLI entry point."""
    parser = argparse.ArgumentParser(
        prog="kmtq",
        description="Strong couplings between transitory queues and their diffusion approximations"
    )
    parser.add_argument("--version", action="version", version=f"kmtq {__version__}")
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    # simulate
    simulate_parser = subparsers.add_parser("simulate", help="One coupled sample and queue trace")
    simulate_parser.add_argument("--n", type=int, help="Population size")
    add_run_flags(simulate_parser)
    simulate_parser.set_defaults(func=cmd_simulate)

    # couple
    couple_parser = subparsers.add_parser("couple", help="One replication's coupling errors")
    couple_parser.add_argument("--n", type=int, help="Population size")
    couple_parser.add_argument("--rep", type=int, default=0, help="Replication id (default: 0)")
    couple_parser.add_argument("--metric", action="append", choices=METRICS,
                               help="Metric to record (repeatable)")
    add_run_flags(couple_parser)
    couple_parser.set_defaults(func=cmd_couple)

    # ladder
    ladder_parser = subparsers.add_parser("ladder", help="Coupled-error ladder and rate fit")
    ladder_parser.add_argument("--kind", choices=LADDER_KINDS, help="Experiment kind")
    add_run_flags(ladder_parser, ladder=True)
    ladder_parser.set_defaults(func=cmd_ladder)

    # validate-bounds
    bounds_parser = subparsers.add_parser("validate-bounds", help="Check tail bounds by Monte Carlo")
    add_run_flags(bounds_parser, ladder=True)
    bounds_parser.set_defaults(func=cmd_validate_bounds)

    # fit-rate
    fit_parser = subparsers.add_parser("fit-rate", help="Fit the error rate of a records.csv")
    fit_parser.add_argument("--records", required=True, help="records.csv from a ladder run")
    fit_parser.add_argument("--metric", required=True, choices=METRICS, help="Metric to fit")
    fit_parser.add_argument("--correction", default="sqrt-log-n",
                            choices=[c for c in CORRECTIONS if c != "sqrt-log-cn"],
                            help="Divide errors by this before fitting (default: sqrt-log-n)")
    fit_parser.set_defaults(func=cmd_fit_rate)

    # help
    help_parser = subparsers.add_parser("help", help="Show help")
    help_parser.add_argument("command_name", nargs="?", help="Command to get help for")
    help_parser.set_defaults(func=lambda args: cmd_help(args, parser))

    args = parser.parse_args()

    if args.command is None:
        parser.print_help()
        sys.exit(EXIT_OK)

    try:
        args.func(args)
    except ValidationError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except KmtqError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_FAIL)


if __name__ == "__main__":
    main()
