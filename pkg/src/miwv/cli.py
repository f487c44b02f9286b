"""Command line entry point.

    miwv <embed|retrieve|score|select|run> --config config.json [overrides]

The config file is JSON (see pipeline.PipelineConfig for the sections);
flags override the corresponding config values. Exit codes: 0 success,
1 usage or config error, 2 data validation error, 3 backend unavailable,
4 missing or stale artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import (
    BackendUnavailableError,
    CacheCorruptError,
    ConfigError,
    MalformedResponseError,
    MissingArtifactError,
    PipelineError,
    StaleArtifactError,
)
from .pipeline import PipelineConfig, cmd_embed, cmd_retrieve, cmd_run, cmd_score, cmd_select, load_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3
EXIT_ARTIFACT = 4

_COMMANDS = {
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "score": cmd_score,
    "select": cmd_select,
    "run": cmd_run,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits with 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miwv", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("embed", "embed the corpus"),
        ("retrieve", "assign nearest neighbors"),
        ("score", "score samples with and without their neighbor"),
        ("select", "rank and export subsets"),
        ("run", "all four stages in order"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument("--output-dir", help="override output_dir from the config")
        p.add_argument(
            "--ratios",
            help="override selection ratios, comma separated (e.g. 0.01,0.05)",
        )
        p.add_argument("--strategy", help="override the selection strategy")
        p.add_argument("--seed", type=int, help="override the random-strategy seed")
        p.add_argument(
            "--source-order",
            action="store_true",
            help="write subsets in ascending id order instead of rank order",
        )
        p.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    return parser


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> None:
    if args.output_dir:
        config.output_dir = args.output_dir
    if args.ratios:
        try:
            config.selection.ratios = [float(r) for r in args.ratios.split(",") if r]
        except ValueError as exc:
            raise ConfigError(f"bad --ratios value: {exc}") from exc
    if args.strategy:
        config.selection.strategy = args.strategy
    if args.seed is not None:
        config.selection.seed = args.seed
    if args.source_order:
        config.selection.source_order = True
    config.validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
        summary = _COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendUnavailableError, MalformedResponseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (MissingArtifactError, StaleArtifactError, CacheCorruptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
