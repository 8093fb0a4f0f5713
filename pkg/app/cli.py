"""Command line entry point: run experiment presets and validate config files.

    hdx-agreement run <preset> [--config PATH] [--seed N] [--out DIR] [--set section.key=value ...]
    hdx-agreement validate --config PATH
    hdx-agreement list-presets
"""

import argparse
import logging
import sys
from typing import List, Optional

from app.env import settings
from app.apis.experiments import PRESETS, dump_config, run_preset, validate_config
from app.apis.utils import ConfigError, HdxError

logger = logging.getLogger("hdx_agreement")

EXIT_FAILED = 1
EXIT_CONFIG = 2


def cmd_run(args: argparse.Namespace) -> int:
    overrides = list(args.set or [])
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    record = run_preset(args.preset, overrides, args.config, args.seed, args.out)
    for verdict in record.verdicts:
        print(f"[{'PASS' if verdict.passed else 'FAIL'}] {verdict.criterion}: {verdict.detail}")
    print(f"{record.preset} {'passed' if record.passed else 'failed'} (config {record.config_hash}, seed {record.config.run.seed})")
    print(f"outputs in {record.config.run.out}")
    return 0 if record.passed else EXIT_FAILED


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = validate_config(args.config)
    sys.stdout.write(dump_config(cfg))
    return 0


def cmd_list_presets(args: argparse.Namespace) -> int:
    width = max(len(name) for name in PRESETS)
    for name, preset in PRESETS.items():
        print(f"{name:<{width}}  {preset.description}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hdx-agreement", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--log-level", default=settings.log_level, help="logging level (default from HDX_LOG_LEVEL)")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment preset")
    run.add_argument("preset", help="preset name, see list-presets")
    run.add_argument("--config", default=None, help="sectioned config file")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="output directory (default: run.out)")
    run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    run.add_argument("--workers", type=int, default=None, help="thread workers; 1 runs serially, 0 sizes the pool automatically")
    run.set_defaults(handler=cmd_run)

    validate = sub.add_parser("validate", help="parse and range-check a config file")
    validate.add_argument("--config", required=True)
    validate.set_defaults(handler=cmd_validate)

    presets = sub.add_parser("list-presets", help="list available presets")
    presets.set_defaults(handler=cmd_list_presets)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except HdxError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
