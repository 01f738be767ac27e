"""segmatch command line: train, localize, close-loops, segment, eval, make-synthetic.

Exit codes: 0 on success, 1 when the run fails, 2 on a usage error.
"""
import argparse
import logging
import sys
from typing import Optional, Sequence

import coloredlogs

from segmatch.exceptions import SegMatchError

from commands import COMMANDS
from config import LOG_FORMAT, LOG_LEVEL

logger = logging.getLogger("segmatch.cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmatch",
        description="Segment-based place recognition and loop-closure detection for 3D point clouds",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic sequence, loop closure with the L2 classifier, then the P(x) table
  segmatch make-synthetic --out synth --seed 0
  segmatch close-loops --scans synth/scans --poses synth/poses.txt --set classifier=l2 --out-dir run
  segmatch eval --records run/records.csv --out-dir run/eval

  # Train a forest on one sequence and use it on another
  segmatch train --scans a/scans --poses a/poses.txt --model forest.segrf
  segmatch close-loops --scans b/scans --poses b/poses.txt --model forest.segrf --out-dir run
        """,
    )
    parser.add_argument("--log-level", default=LOG_LEVEL, help=f"Logging level (default: {LOG_LEVEL})")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def setup_logging(level: str) -> None:
    coloredlogs.install(level=level.upper(), fmt=LOG_FORMAT)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        setup_logging(args.log_level)
        return args.handler(args)
    except SystemExit as e:
        # argparse usage errors and --help
        return e.code if isinstance(e.code, int) else 2
    except (SegMatchError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
