"""Command-line entry point: ``afg-lab <subcommand> --config run.toml``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import OUTPUT_ENV, load_config
from .errors import AfgLabError, ConfigurationError, DependencyError

COMMANDS = {
    "train-first": "generate/ingest the dataset and train the first classifier",
    "attack": "run every configured attack against the first classifier",
    "afs": "per-layer separability curves (CSV + plot) for each attack",
    "groupviz": "group-feature montages for a few test images",
    "build-afg": "build the clean + adversarial AFG datasets",
    "train-recognizer": "train one mixed-label recognizer per attack",
    "evaluate": "run the configured evaluation suites",
    "report": "render report tables from a finished evaluation",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afg-lab", description="Adversarial feature genome pipeline.",
        epilog=f"Set {OUTPUT_ENV} to override the output root from the config.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", "-c", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for attacks and AFG building (1 is bit-reproducible)")
        if name == "report":
            p.add_argument("--dump-data", action="store_true",
                           help="also write the numeric series behind each AFS plot as CSV")
    return parser


def run(args) -> object:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    cfg.root.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "train-first":
        return str(pipeline.cmd_train_first(cfg))
    if cmd == "attack":
        return pipeline.cmd_attack(cfg, args.jobs)
    if cmd == "afs":
        res = pipeline.cmd_afs(cfg)
        return {name: {"distance": list(v["curve"].mean_distance), "kl": list(v["curve"].mean_kl),
                       "noise_distance": list(v["noise"].mean_distance)} for name, v in res.items()}
    if cmd == "groupviz":
        return [str(p) for p in pipeline.cmd_groupviz(cfg)]
    if cmd == "build-afg":
        return pipeline.cmd_build_afg(cfg, args.jobs)
    if cmd == "train-recognizer":
        return {k: str(v) for k, v in pipeline.cmd_train_recognizer(cfg).items()}
    if cmd == "evaluate":
        pipeline.cmd_evaluate(cfg)
        return pipeline.cmd_report(cfg)
    if cmd == "report":
        return pipeline.cmd_report(cfg, dump_data=args.dump_data)
    raise ConfigurationError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        out = run(args)
    except DependencyError as exc:
        print(f"afg-lab {args.command}: dependency error: {exc}", file=sys.stderr)
        return 3
    except ConfigurationError as exc:
        print(f"afg-lab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except AfgLabError as exc:
        print(f"afg-lab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out if isinstance(out, str) else json.dumps(out, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
