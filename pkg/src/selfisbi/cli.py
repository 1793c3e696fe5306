"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import PipelineConfig
from .errors import ArtifactError, BudgetExhausted, ConfigError, EnsembleFailure, SelfiSBIError
from .pipeline import (
    cmd_check_misspec,
    cmd_compress_and_sbi,
    cmd_generate_mock,
    cmd_report,
    cmd_selfi,
)

log = logging.getLogger("selfisbi")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENSEMBLE = 3
EXIT_BUDGET = 4
EXIT_ARTIFACT = 5

COMMANDS = {
    "generate-mock": cmd_generate_mock,
    "selfi": cmd_selfi,
    "check-misspec": cmd_check_misspec,
    "compress-sbi": cmd_compress_and_sbi,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfisbi",
        description="Latent-function inference, misspecification check and compressed rejection ABC.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="seed_root override (non-negative)")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--model", choices=("A", "B"), help="observer model override")
        p.add_argument("--threads", type=int, help="worker threads for simulation stages")
    dump = sub.add_parser("dump-config", help="print the effective config as YAML")
    dump.add_argument("--config")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    for key, attr in (("seed", "seed_root"), ("out", "out"), ("model", "model"), ("threads", "threads")):
        value = getattr(args, key, None)
        if value is not None:
            overrides[attr] = value
    return replace(cfg, **overrides).validate()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "dump-config":
            cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
            sys.stdout.write(cfg.to_yaml())
            return EXIT_OK
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg)
        if args.command == "report":
            sys.stdout.write(result)
        else:
            log.info("%s finished: %s simulations, %.2f s", args.command,
                     result.get("simulator_calls", 0), result.get("wall_seconds", 0.0))
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except EnsembleFailure as exc:
        log.error("ensemble failure: %s", exc)
        return EXIT_ENSEMBLE
    except BudgetExhausted as exc:
        log.warning("%s; partial results were written", exc)
        return EXIT_BUDGET
    except ArtifactError as exc:
        log.error("artifact error: %s", exc)
        return EXIT_ARTIFACT
    except SelfiSBIError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
