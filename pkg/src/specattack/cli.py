"""Command-line front end.

Every command accepts ``--config`` (YAML), ``--seed``, ``--workers``,
``--out`` and ``--dry-run``; ``--toy`` selects the bundled synthetic corpus.
Environment variables prefixed ``SPECATTACK_`` override config keys (nested
keys joined by ``__``).  On failure a JSON error record is written to stderr
and the exit code is nonzero (2 for config errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline as P

COMMANDS = {
    "ingest": ("ingest",),
    "augment": ("augment",),
    "spectrogram": ("spectrogram",),
    "train": ("train",),
    "attack": ("attack",),
    "transfer": ("transfer",),
    "report": ("report",),
    "pipeline": P.STAGES,
}

HELP = {
    "ingest": "write the toy corpus or validate an existing dataset into <out>/data",
    "augment": "add pitch-shifted copies (factors 0.75, 0.9, 1.15, 1.5 by default)",
    "spectrogram": "compute SPG1 spectrograms for every representation",
    "train": "train one checkpoint per representation and model seed",
    "attack": "run the attack budget sweep against the primary model",
    "transfer": "compute the transfer matrix between seeded models",
    "report": "emit report.json, report.csv and SVG plots",
    "pipeline": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="base seed (models use seed, seed+1, ...)")
    common.add_argument("--workers", type=int, help="worker threads for transforms and attacks")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate the config and print it; write nothing")
    common.add_argument("--toy", action="store_true", help="use the bundled synthetic toy corpus")
    common.add_argument("--dataset", help="dataset root (class subdirectories) or manifest CSV")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="specattack", description="Adversarial robustness of audio spectrogram classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def resolve_config(args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    if args.out is not None:
        over["out"] = args.out
    if args.toy:
        over["dataset"] = {"toy": True, "name": "toy"}
    if args.dataset is not None:
        over.setdefault("dataset", {}).update({"toy": False, "root": args.dataset})
    path = args.config or environ.get(P.ENV_PREFIX + "CONFIG")
    return P.load_config(path, over, environ)


def _error(exc, code):
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, P.ConfigError):
        rec["violations"] = [{"field": f, "message": m} for f, m in exc.violations]
        rec["field"] = exc.violations[0][0] if exc.violations else None
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = P.validate(resolve_config(args))
        if args.dry_run:
            print(json.dumps({"command": args.command, "valid": True, "config": cfg}, indent=2, sort_keys=True, default=str))
            return 0
        P.run_pipeline(cfg, COMMANDS[args.command])
        print(json.dumps({"command": args.command, "out": str(cfg["out"]), "status": "ok"}, sort_keys=True))
        return 0
    except P.ConfigError as exc:
        return _error(exc, 2)
    except Exception as exc:  # surfaced as a machine-readable record
        return _error(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
