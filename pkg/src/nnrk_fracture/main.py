#!/usr/bin/env python
"""Command-line entry points: ``nnrk run|convergence|validate <config>``.

``<config>`` is a YAML file or the name of a shipped preset.
"""
from __future__ import annotations

import argparse
import logging
import sys

import torch

from .errors import ConfigError, NNRKError
from .settings import RunConfig, apply_overrides, env_overrides, load_config, preset_names

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnrk", description="Neural-network enriched RKPM fracture solver")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help=f"YAML file or preset ({', '.join(preset_names())})")
        p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
        p.add_argument("--output-dir", default=None, help="overrides output.directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
        p.add_argument("--quiet", action="store_true", help="no progress bar")

    run = sub.add_parser("run", help="run the load program")
    common(run)
    run.add_argument("--resume", default=None, metavar="CHECKPOINT", help="continue from a checkpoint file")
    common(sub.add_parser("convergence", help="h or neuron convergence study"))
    common(sub.add_parser("validate", help="reproduction, SCNI and gradient checks on a small instance"))
    return parser


def _configure_logging(level: str | None) -> None:
    level = (level or env_overrides().get("log_level") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args) -> RunConfig:
    cfg = apply_overrides(load_config(args.config), args.threads, args.seed, args.output_dir)
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    return cfg


def cmd_run(args) -> int:
    from .driver import run_simulation

    cfg = _load(args)
    result = run_simulation(cfg, resume=args.resume, progress=not args.quiet)
    print(f"{len(result.records)} steps written to {result.output_dir}")
    if result.errors is not None:
        e = result.errors
        print(f"L2 error {e.l2:.4e} (relative {e.l2_relative:.4e}), H1 error {e.h1:.4e} (relative {e.h1_relative:.4e})")
    return 0


def cmd_convergence(args) -> int:
    from .studies import convergence_study

    cfg = _load(args)
    result = convergence_study(cfg, progress=not args.quiet)
    print(f"{'value':>8} {'size':>12} {'L2':>12} {'H1':>12}")
    for p in result.points:
        print(f"{p.value:>8d} {p.size:>12.4e} {p.l2:>12.4e} {p.h1:>12.4e}")
    print(f"slopes: L2 {result.l2_slope:.3f}, H1 {result.h1_slope:.3f}")
    return 0


def cmd_validate(args) -> int:
    from .studies import validate

    cfg = _load(args)
    results = validate(cfg)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"run": cmd_run, "convergence": cmd_convergence, "validate": cmd_validate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NNRKError as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _script(command: str, what: str) -> None:
    try:
        code = main([command, *sys.argv[1:]])
    except SystemExit:
        raise
    except Exception as e:
        raise Exception(f"An error occurred while {what}: {e}") from e
    sys.exit(code)


def run():
    """
    Run a simulation.
    """
    _script("run", "running the simulation")


def convergence():
    """
    Run a convergence study.
    """
    _script("convergence", "running the convergence study")


def validate():
    """
    Check the discretization and the loss gradient on a downscaled instance.
    """
    _script("validate", "validating the configuration")


def cli():
    sys.exit(main())


if __name__ == "__main__":
    cli()
