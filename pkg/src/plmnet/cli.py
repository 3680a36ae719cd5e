"""Command line: ``plmnet {collect,train,evaluate,reproduce}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 an acceptance criterion failed, 4 finished but some evaluation arm left the
track.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ACCEPTANCE, EXIT_OFF_TRACK = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with configuration overrides")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="run directory")
    parser = _Parser(prog="plmnet", description="Latency-compensated imitation steering experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("collect", parents=[common], help="drive the expert and record a dataset")
    sub.add_parser("train", parents=[common], help="train the base model, then the predictor")
    ev = sub.add_parser("evaluate", parents=[common], help="closed-loop evaluation of the three arms")
    ev.add_argument("--delta", type=float, action="append",
                    help="constant latency in seconds (repeatable); replaces the configured schedules")
    ev.add_argument("--schedule", action="append",
                    help="none, const:<d> or tv:<lo>:<hi> (repeatable); replaces the configured schedules")
    ev.add_argument("--track", help="evaluation track preset or JSON file")
    rep = sub.add_parser("reproduce", parents=[common], help="collect, train, evaluate and check acceptance")
    rep.add_argument("--skip-checks", action="store_true", help="skip the randomized property criteria")
    return parser


def cli_overrides(args) -> dict:
    out = {}
    for name in ("seed", "out", "track"):
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    schedules = [f"const:{d!r}" for d in getattr(args, "delta", None) or []]
    schedules += getattr(args, "schedule", None) or []
    if schedules:
        out["schedules"] = tuple(schedules)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, cli=cli_overrides(args))
    except ConfigError as exc:
        print(f"plmnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from . import experiment

    def log(msg):
        print(msg, flush=True)

    try:
        if args.command == "collect":
            experiment.collect(cfg, log)
        elif args.command == "train":
            experiment.train(cfg, log)
        elif args.command == "evaluate":
            reports, _ = experiment.evaluate(cfg, log)
            if experiment.any_off_track(reports):
                return EXIT_OFF_TRACK
        else:
            criteria, _ = experiment.reproduce(cfg, log, quick_checks=not args.skip_checks)
            if any(c.passed is False for c in criteria):
                return EXIT_ACCEPTANCE
    except experiment.StageError as exc:
        print(f"plmnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"plmnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
