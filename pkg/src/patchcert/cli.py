"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs).
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .errors import ConfigError, DataError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchcert", description="Certified patch detection at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("train", "train a vanilla model and finetune it with pruning"),
                       ("attack", "optimise an adversarial patch and evaluate it"),
                       ("certify", "certify and detect on benign images"),
                       ("detect", "run detection on benign images"),
                       ("recover", "detect and recover on patched images"),
                       ("analyze", "winner clustering and occlusion stability"),
                       ("sweep", "repeat certification over a parameter grid")]:
        s = sub.add_parser(name, help=text)
        s.add_argument("-c", "--config", help="key = value config file")
        s.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if name == "sweep":
            s.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMS))
            s.add_argument("--values", required=True, help="comma-separated values")
    return p


def _overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v
    return out


def _summary(command: str, res: dict) -> str:
    if "clean_acc" in res:
        line = f"clean={res['clean_acc']:.4f}, certified={res['certified_acc']:.4f}"
        if command == "recover":
            line += ", " + ", ".join(f"{k}={harness._fmt(res[k])}"
                                     for k in ("attacked_acc", "detection_rate", "recovered_acc"))
        return line
    return ", ".join(f"{k}={harness._fmt(v)}" for k, v in res.items())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config, _overrides(args.set))
        runners = {"train": harness.run_train, "attack": harness.run_attack,
                   "certify": harness.run_certify, "detect": harness.run_detect,
                   "recover": harness.run_recover, "analyze": harness.run_analyze}
        if args.command == "sweep":
            res = harness.run_sweep(cfg, args.param, [v for v in args.values.split(",") if v.strip()])
        else:
            res = runners[args.command](cfg)
    except ConfigError as exc:
        print(f"patchcert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, OSError) as exc:
        print(f"patchcert: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(_summary(args.command, res))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
