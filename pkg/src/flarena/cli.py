"""Command line entry point.

    flarena run --config F [--set section.key=value]...
    flarena cues --config F [--set ...]
    flarena report DIR... [--out DIR]

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import data
from .config import ConfigError, load_config
from .experiment import cue_statistics, report, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flarena", description="Federated poisoning attack / defence arena.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run an experiment"), ("cues", "run with passive cue logging")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        s.add_argument("--out", default=None, help="output directory (default: <run.output>/<run.name>)")
        s.add_argument("--quiet", action="store_true")
    r = sub.add_parser("report", help="summarise run directories")
    r.add_argument("dirs", nargs="+")
    r.add_argument("--out", default=None, help="write summary.txt and CSV tables here")
    return p


def _progress(seed, rec):
    print(f"seed {seed} round {rec.t:4d}  acc {rec.test_acc:.4f}  loss {rec.test_loss:.4f}  "
          f"excluded {rec.excluded}", file=sys.stderr, flush=True)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("run", "cues"):
            try:
                cfg = load_config(args.config, args.set)
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            fn = run_experiment if args.command == "run" else cue_statistics
            out = fn(cfg, args.out, progress=None if args.quiet else _progress)
            print(out)
        else:
            rep = report(args.dirs, args.out)
            print(rep.text())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data.DatasetNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
