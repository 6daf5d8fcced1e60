"""Command-line entry point.

    mobiledit <verb> --config FILE [--seed N] [--out DIR] [--parallel N]
    mobiledit run FILE

Exit codes: 0 success, 2 config error, 3 missing upstream stage, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import STAGES, load_config, parse_config
from .errors import DependencyError, NumericFailure, SchemaError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobiledit", description="Toy mobile video-DiT optimization pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in (*STAGES, "run"):
        p = sub.add_parser(verb)
        if verb == "run":
            p.add_argument("config_path")
        else:
            p.add_argument("--config", default=None, help="YAML config; defaults apply when omitted")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--parallel", type=int, default=None, help="worker count for sweeps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # imported lazily so `--help` stays fast
    from .runner import run

    try:
        path = args.config_path if args.verb == "run" else args.config
        cfg = load_config(path) if path else parse_config({})
        overrides = {}
        if args.verb != "run":
            overrides["stage"] = args.verb
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.parallel is not None:
            overrides["parallel"] = args.parallel
        if overrides:
            cfg = parse_config({**cfg.model_dump(mode="json"), **overrides})
        report = run(cfg)
    except SchemaError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{report.stage}: done ({report.config_hash}) -> {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
