"""psl <subcommand> --config <path> [--out <dir>] [--seed <n>] [--jobs <n>]"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config, harness


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="psl", description="perturbation-spectrum lab")
    parser.add_argument("subcommand", choices=harness.SUBCOMMANDS)
    parser.add_argument("--config", help="YAML config; omitted sections take their defaults")
    parser.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = config.load(args.config, args.seed)
        harness.run(args.subcommand, resolved, args.out, max(1, args.jobs))
    except (config.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"psl: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
