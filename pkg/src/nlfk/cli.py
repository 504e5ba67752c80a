"""Command line entry point: ``nlfk run <config>`` and ``nlfk table <config>``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import CHECKS, bundled_config_path, load_config
from .errors import InputError, NlfkError, NumericError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="nlfk", description="Solvers and property checks for sup-envelope parabolic problems.")
    p.add_argument("--list-checks", action="store_true", help="list the named property checks and exit")
    sub = p.add_subparsers(dest="command")
    for name, desc in (("run", "run solvers and checks"), ("table", "run a convergence table")):
        s = sub.add_parser(name, help=desc)
        s.add_argument("config", help="config file, or the name of a bundled config such as heat.cfg")
        s.add_argument("--seed", type=int, help="override the config seed (u64)")
        s.add_argument("--out", help="output directory (default: NLFK_OUT, then the config's output)")
        s.add_argument("--jobs", type=int, default=1, help="worker count hint")
    return p


def _resolve(path):
    p = Path(path)
    if not p.exists() and not p.parent.parts:
        bundled = bundled_config_path(path)
        if bundled.exists():
            return bundled
    return p


def _output_dir(args, cfg):
    if args.out:
        return Path(args.out)
    env = os.environ.get("NLFK_OUT")
    return Path(env) if env else Path(cfg.output)


def main(argv=None):
    from .experiment import convergence_table, run_experiment

    parser = _parser()
    args = parser.parse_args(argv)
    if args.list_checks:
        width = max(map(len, CHECKS))
        for name, desc in CHECKS.items():
            print(f"{name:<{width}}  {desc}")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(_resolve(args.config))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = _output_dir(args, cfg)
        if args.command == "run":
            report = run_experiment(cfg, jobs=args.jobs, out=out)
            sys.stdout.write(report.render())
            return report.exit_code
        table = convergence_table(cfg, jobs=args.jobs)
        out.mkdir(parents=True, exist_ok=True)
        table.write(out / "table.csv")
        text = table.render() + "\n"
        (out / "table.txt").write_text(text)
        sys.stdout.write(text)
        return EXIT_OK
    except InputError as exc:
        print(f"error{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NlfkError as exc:
        print(f"error{_where(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _where(exc):
    stage = getattr(exc, "stage", None)
    return f" in stage {stage}" if stage else ""


if __name__ == "__main__":
    sys.exit(main())
