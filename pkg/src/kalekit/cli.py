"""``kalekit`` command line.

Every stage subcommand runs that pipeline stage inside a work directory;
``run`` executes several (default: all). Configuration comes from an
optional ``--config`` key=value file, then ``--set key=value`` pairs, then
stage-specific flags, later sources winning.

Exit codes: 0 success, 1 usage error, 2 data/configuration error,
3 numeric or training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import config as C
from .errors import KaleError, UsageError
from .pipeline import STAGE_NAMES, run_pipeline
from .tables import verify_paper_tables

log = logging.getLogger("kalekit")

# which config sections each subcommand exposes as flags
STAGE_FLAGS = {
    "gen-data": ("data", "records"),
    "train": ("train",),
    "index": (),
    "prune": ("kale",),
    "align": ("kale",),
    "search": ("eval",),
    "eval": ("eval",),
    "bench": ("bench",),
    "verify-tables": (),
    "report": (),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(name: str) -> str:
    return f"--{name.replace('_', '-')}"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--workdir", help="artifact directory (config key: workdir)")
    p.add_argument("--seed", type=int, help="seed for every stochastic stage")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key; repeatable")
    p.add_argument("--force", action="store_true", help="rebuild even when outputs are up to date")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")


def _add_section_flags(p: argparse.ArgumentParser, sections: Sequence[str]) -> None:
    for section in sections:
        group = p.add_argument_group(f"{section} settings")
        for f in dataclasses.fields(C.SECTIONS[section]):
            if f.name == "seed":
                continue
            group.add_argument(_flag(f.name), dest=f"{section}.{f.name}", metavar="VALUE",
                               help=f"sets {section}.{f.name}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kalekit", description="Dense-retrieval compression toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    run = sub.add_parser("run", help="run several stages in dependency order")
    _add_common(run)
    run.add_argument("--stages", help=f"comma list from {','.join(STAGE_NAMES)} (default all)")
    for name in STAGE_NAMES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _add_common(p)
        _add_section_flags(p, STAGE_FLAGS[name])
        if name == "train":
            p.add_argument("--query-layers", dest="query.num_layers", metavar="N")
            p.add_argument("--document-layers", dest="document.num_layers", metavar="N")
        if name == "verify-tables":
            p.add_argument("tables", nargs="*", type=Path, help="table files (default: bundled)")
            p.add_argument("--strict", action="store_true", help="exit 2 if any table is out of tolerance")
    return parser


def _settings(args: argparse.Namespace) -> dict[str, str]:
    values = C.read_keyvalue(args.config) if args.config else {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    for key, value in vars(args).items():
        if "." in key and value is not None:
            values[key] = value
    if args.workdir:
        values["workdir"] = args.workdir
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return UsageError.exit_code
        if args.command == "verify-tables" and args.tables:
            report = verify_paper_tables(args.tables)
            sys.stdout.write(report.to_text())
            return 0 if report.ok or not args.strict else 2
        cfg = C.PipelineConfig.from_mapping(_settings(args))
        stages = args.stages if args.command == "run" else [args.command]
        result = run_pipeline(cfg, stages, force=args.force)
        for name in result.ran:
            print(f"ran\t{name}")
        for name in result.skipped:
            print(f"skipped\t{name}")
        if args.command == "verify-tables":
            text = (result.root / "tables.txt").read_text(encoding="utf-8")
            sys.stdout.write(text)
            if args.strict and "FAIL\t" in text:
                return 2
        return 0
    except KaleError as exc:
        print(f"kalekit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kalekit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
