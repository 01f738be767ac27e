"""`localize`: match a sequence against a prior target map."""
import argparse
import logging
from pathlib import Path

from segmatch.io import load_sequence
from segmatch.pipeline import SegMatchPipeline
from segmatch.schemas import PipelineMode
from segmatch.targetmap import load_map

from .common import add_config_arguments, add_sequence_arguments, load_run_model, resolve_config, run_pipeline

logger = logging.getLogger("segmatch.cli.localize")


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "localize",
        help="Localize a sequence in a prior segment map",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  segmatch localize --map run1/map.segmap --scans data/00/scans --poses data/00/poses.txt \\
      --model forest.segrf --out-dir run2
  segmatch localize --map run1/map.segmap --scans data/00/scans --poses data/00/poses.txt \\
      --set classifier=l2 --out-dir run2
        """,
    )
    add_sequence_arguments(parser)
    add_config_arguments(parser)
    parser.add_argument("--map", type=Path, required=True, help="Target map file (SEGMAP1)")
    parser.add_argument("--model", type=Path, help="Forest model file; required with classifier=forest")
    parser.add_argument("--out-dir", type=Path, required=True, help="Directory for records.csv and closures.csv")
    parser.set_defaults(handler=run, parser=parser)


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args, {"mode": PipelineMode.LOCALIZATION.value})
    target_map = load_map(args.map)
    logger.info(f"Target map {args.map}: {len(target_map)} segments")
    model = load_run_model(args.model, config)
    dataset = load_sequence(args.scans, args.poses)
    pipeline = SegMatchPipeline(config, model, target_map)
    run_pipeline(pipeline, dataset, args.out_dir, "localize")
    return 0
