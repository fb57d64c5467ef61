"""Command-line interface.

Exit codes: 0 on success, 1 for configuration or usage problems, 2 for
runtime failures inside a stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .assembly import (
    FORMAT_PAIR,
    MIX_MODES,
    MODE_RATIO,
    MixPlan,
    RECORD_FORMATS,
    assemble_recon,
    export_records,
    load_domain,
    load_records,
    mix,
)
from .config import PRESETS, apply_preset, load_config
from .errors import ConfigError, SftReconError
from .judging import CuratedPair
from .pipeline import MANIFEST_FILE, STAGES, PipelineResult, resume, run
from .runio import read_jsonl

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

_STAGE_COMMANDS = ("elicit", "respond", "judge", "select", "report")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_run_options(parser: argparse.ArgumentParser, include_stop_after: bool) -> None:
    parser.add_argument("--config", type=Path, help="path to a JSON run config")
    parser.add_argument("--run-dir", type=Path, help="run directory (overrides the config)")
    parser.add_argument("--preset", choices=PRESETS, help="apply an ablation preset")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--n-instructions", type=int, help="override the corpus size")
    if include_stop_after:
        parser.add_argument(
            "--stop-after", choices=STAGES, help="stop after this stage completes"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sftrecon",
        description=(
            "Reconstruct a chat model's instruction distribution, synthesize "
            "committee-judged responses, and assemble a training-ready dataset."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging to stderr"
    )
    parser.add_argument(
        "-q", "--quiet", action="store_true", help="only warnings and errors"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="start a fresh pipeline run")
    _add_run_options(run_parser, include_stop_after=True)

    resume_parser = commands.add_parser("resume", help="continue an interrupted run")
    resume_parser.add_argument("--run-dir", type=Path, required=True)
    resume_parser.add_argument("--stop-after", choices=STAGES)

    for stage in _STAGE_COMMANDS:
        stage_parser = commands.add_parser(
            stage, help=f"run the pipeline up to and including the {stage} stage"
        )
        _add_run_options(stage_parser, include_stop_after=False)

    mix_parser = commands.add_parser(
        "mix", help="mix a recon dataset with a domain dataset, standalone"
    )
    mix_parser.add_argument("--recon", type=Path, required=True, help="recon JSONL path")
    mix_parser.add_argument("--domain", type=Path, help="domain JSONL path")
    mix_parser.add_argument("--out", type=Path, required=True, help="output JSONL path")
    mix_parser.add_argument(
        "--recon-format",
        choices=RECORD_FORMATS + ("curated",),
        default="curated",
        help="recon file layout; 'curated' reads a curated_pairs.jsonl",
    )
    mix_parser.add_argument("--domain-format", choices=RECORD_FORMATS, default=FORMAT_PAIR)
    mix_parser.add_argument("--format", choices=RECORD_FORMATS, default=FORMAT_PAIR,
                            help="output record layout")
    mix_parser.add_argument("--domain-fraction", type=float, default=0.17)
    mix_parser.add_argument("--total", type=int, help="total output records (ratio mode)")
    mix_parser.add_argument("--mode", choices=MIX_MODES, default=MODE_RATIO)
    mix_parser.add_argument("--seed", type=int, default=0)

    validate_parser = commands.add_parser(
        "validate-config", help="check a config file and print its digest"
    )
    validate_parser.add_argument("--config", type=Path, required=True)

    return parser


def _configure_logging(args) -> None:
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.INFO
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def _load_run_config(args):
    if args.config is None:
        raise ConfigError("--config is required to start a run")
    config = load_config(args.config)
    if args.preset:
        config = apply_preset(config, args.preset)
    if args.run_dir is not None:
        config.run_dir = args.run_dir
    if args.seed is not None:
        config.seed = args.seed
    if args.n_instructions is not None:
        config.n_instructions = args.n_instructions
    config.validate()
    return config


def _print_result(result: PipelineResult) -> None:
    for stage in STAGES:
        entry = result.manifest["stages"][stage]
        records = entry["records"] if entry["records"] is not None else "-"
        print(f"{stage:<8} {entry['status']:<8} records={records}")
    if result.train_digest:
        print(f"train.jsonl sha256={result.train_digest}")
    print(f"run dir: {result.run_dir}")


def _cmd_run(args) -> int:
    result = run(_load_run_config(args), stop_after=args.stop_after)
    _print_result(result)
    return EXIT_OK


def _cmd_resume(args) -> int:
    result = resume(args.run_dir, stop_after=args.stop_after)
    _print_result(result)
    return EXIT_OK


def _cmd_stage(args, stage: str) -> int:
    """Make-like: reuse whatever the run directory already holds."""
    run_dir = args.run_dir
    if run_dir is None and args.config is not None:
        run_dir = _load_run_config(args).run_dir
    if run_dir is not None and (Path(run_dir) / MANIFEST_FILE).exists():
        result = resume(run_dir, stop_after=stage)
    else:
        result = run(_load_run_config(args), stop_after=stage)
    _print_result(result)
    return EXIT_OK


def _cmd_mix(args) -> int:
    if args.recon_format == "curated":
        pairs = [CuratedPair.from_dict(row) for row in read_jsonl(args.recon)]
        recon = assemble_recon(pairs)
    else:
        records, _ = load_records(args.recon, args.recon_format)
        recon = records
    domain = load_domain(args.domain, args.domain_format) if args.domain else []
    plan = MixPlan(
        domain_fraction=args.domain_fraction, mode=args.mode, total_size=args.total
    )
    mixed = mix(recon, domain, plan, args.seed)
    result = export_records(mixed, args.out, args.format)
    domain_count = sum(1 for record in mixed if record.origin == "domain")
    print(
        f"wrote {result.count} records ({domain_count} domain) to {result.path} "
        f"sha256={result.sha256}"
    )
    return EXIT_OK


def _cmd_validate_config(args) -> int:
    config = load_config(args.config)
    print(f"OK {config.digest()}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "resume":
            return _cmd_resume(args)
        if args.command in _STAGE_COMMANDS:
            return _cmd_stage(args, args.command)
        if args.command == "mix":
            return _cmd_mix(args)
        if args.command == "validate-config":
            return _cmd_validate_config(args)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SftReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
