"""Command-line entry point: ``bpa <stage> --config run.yaml --set key=value``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as C
from .pipeline import STAGES, MissingDependency, Run, StageError, run_all, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpa", description="Bulk-production augmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config (defaults to the desk profile)")
        p.add_argument("--profile", choices=sorted(C.PROFILES), help="base profile when --config omits one")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set detector.epochs=5")
        p.add_argument("--force", action="store_true", help="wipe and redo a stage whose directory is not empty")

    for stage in STAGES:
        p = sub.add_parser(stage)
        common(p)
        if stage in ("build-dataset", "train-apn", "eval-apn"):
            p.add_argument("--condition", choices=("A", "B", "C", "D"))
    common(sub.add_parser("run-all", help="every stage in order"))
    p = sub.add_parser("default-config", help="print a profile's config as YAML")
    p.add_argument("--profile", choices=sorted(C.PROFILES), default="desk")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "default-config":
            cfg = C.apply_overrides(C.PROFILES[args.profile], args.overrides)
            sys.stdout.write(C.dump_config(cfg))
            return EXIT_OK
        cfg = C.load_config(args.config, args.overrides, args.profile)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run-all":
            run_all(cfg, force=args.force)
        else:
            run = Run(cfg)
            run_stage(run, args.command, getattr(args, "condition", None), force=args.force)
            print(run.path(args.command))
    except MissingDependency as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except (StageError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
