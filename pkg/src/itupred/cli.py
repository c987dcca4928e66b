"""Command-line entry point.

Subcommands run pipeline stages against an output directory. Exit codes:
0 success, 2 configuration error, 3 missing upstream artifact, 4 data error,
5 internal failure. Errors print one machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .annotator import LexiconError
from .config import ConfigError, config_hash, load_config
from .corpus import ConfigurationError, CorpusFormatError
from .pipeline import STAGES, MissingArtifactError, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_DATA = 4
EXIT_INTERNAL = 5

OUTPUT_DIR_ENV = "ITUPRED_OUTPUT_DIR"

PIPELINE_ORDER = (
    "gen",
    "annotate",
    "build",
    "stats",
    "train-rf",
    "train-lstm",
    "eval",
    "explain",
    "report",
)


def _error(kind: str, code: int, detail: str) -> int:
    print(f"error code={code} kind={kind} detail={json.dumps(detail)}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itupred",
        description="ITU admission prediction pipeline over synthetic clinical notes",
    )
    parser.add_argument("command", choices=[*PIPELINE_ORDER, "all"], help="pipeline stage to run")
    parser.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        help="override a config entry (JSON-parsed value); repeatable",
    )
    parser.add_argument("--output-dir", help="override the config output directory")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching our config-error code
        return EXIT_CONFIG if exc.code else EXIT_OK

    try:
        config = load_config(args.config, args.overrides)
    except ConfigError as exc:
        return _error("config", EXIT_CONFIG, str(exc))

    outdir = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or config["output_dir"]

    stages = PIPELINE_ORDER if args.command == "all" else (args.command,)
    try:
        for stage in stages:
            summary = run_stage(stage, config, outdir)
            print(
                json.dumps(
                    {"stage": stage, "config_hash": config_hash(config), **summary},
                    sort_keys=True,
                )
            )
    except MissingArtifactError as exc:
        return _error("missing_artifact", EXIT_MISSING_ARTIFACT, str(exc))
    except (CorpusFormatError, LexiconError, ConfigurationError) as exc:
        return _error("data", EXIT_DATA, str(exc))
    except (ValueError, KeyError, TypeError, OSError) as exc:
        return _error("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
