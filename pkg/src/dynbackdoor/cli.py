"""Command line entry point: ``dynbackdoor {ingest,train,attack,transfer,sweep,report}``.

Each configuration key is also a flag (``--train-fraction 0.7``); flags
override values read from ``--config``. Runs land under ``--output-root``,
else ``$DYNBD_OUTPUT_ROOT``, else ``./runs``.

Exit status: 0 when every stage succeeded, 1 when a run failed or was
incomplete, 2 for invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, pipeline
from .config import OUTPUT_ROOT_ENV, SCHEMA, ConfigError, flatten, parse_ini, validate

COMMANDS = {
    "ingest": "parse an edge list, build snapshots and report dataset statistics",
    "train": "pre-train a clean model and report its test AUC",
    "attack": "full attack run: pre-train, select targets, poison, retrain, evaluate",
    "transfer": "poison every model family with triggers crafted against one family",
    "sweep": "scenario-I sensitivity of ASR/AMC/AUC to one budget ratio",
    "report": "merge finished runs into one table with bar and line plots",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [data] [model] [attack] [run] sections")
    g = p.add_argument_group("configuration keys (override --config)")
    for key, spec in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{key}", metavar=key.upper(), default=None,
                       help=f"{spec.section}.{key}" + (f" ({spec.rule})" if spec.rule else ""))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynbackdoor", description="Backdoor attacks on dynamic link prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        _add_config_flags(p)
        if name == "report":
            p.add_argument("runs", nargs="+", type=Path, help="run directories to merge")
        else:
            p.add_argument("--resume", type=Path, help="continue an interrupted run directory")
    return parser


def load_config(args: argparse.Namespace, require_data: bool = True):
    doc: dict = {}
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        doc = flatten(parse_ini(args.config.read_text(encoding="utf-8")))
    for key in SCHEMA:
        val = getattr(args, f"cfg_{key}")
        if val is not None:
            doc[key] = val
    return validate(doc, require_data=require_data)


def _print_result(res: pipeline.RunResult) -> None:
    print(f"run directory: {res.run.path}")
    for rel in sorted(res.manifest.get("metric_files", [])):
        print(f"  {rel}")
    if not res.ok:
        print(f"FAILED at stage {res.manifest.get('failed_stage')}: {res.manifest.get('error', '')}",
              file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args, require_data=args.command != "report")
        if args.command == "report":
            res = pipeline.report(args.runs, cfg)
        else:
            res = getattr(pipeline, {"attack": "run"}.get(args.command, args.command))(cfg, resume=args.resume)
    except (ConfigError, pipeline.RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _print_result(res)
    if res.ok and args.command == "ingest":
        print((res.run.path / "data" / "stats.json").read_text(encoding="utf-8"), end="")
    if res.ok and args.command == "attack" and res.value is not None:
        rep = res.value
        asr = "n/a" if rep.asr is None else f"{rep.asr:.4f}"
        print(f"ASR {asr}  AUC clean {rep.auc_clean:.4f}  AUC backdoored {rep.auc_backdoored:.4f}")
    return 0 if res.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
