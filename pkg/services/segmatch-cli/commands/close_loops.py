"""`close-loops`: online loop-closure detection while the map grows."""
import argparse
import logging
from pathlib import Path

from segmatch.io import load_sequence
from segmatch.pipeline import SegMatchPipeline
from segmatch.schemas import PipelineMode
from segmatch.targetmap import save_map

from .common import add_config_arguments, add_sequence_arguments, load_run_model, resolve_config, run_pipeline

logger = logging.getLogger("segmatch.cli.close_loops")


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "close-loops",
        help="Detect loop closures along a sequence and build its segment map",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  segmatch close-loops --scans data/00/scans --poses data/00/poses.txt --model forest.segrf --out-dir run1
  segmatch close-loops --scans synth/scans --poses synth/poses.txt --config synthetic.conf --out-dir run1
        """,
    )
    add_sequence_arguments(parser)
    add_config_arguments(parser)
    parser.add_argument("--model", type=Path, help="Forest model file; required with classifier=forest")
    parser.add_argument("--out-dir", type=Path, required=True, help="Directory for records.csv, closures.csv and map.segmap")
    parser.set_defaults(handler=run, parser=parser)


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args, {"mode": PipelineMode.LOOP_CLOSURE.value})
    model = load_run_model(args.model, config)
    dataset = load_sequence(args.scans, args.poses)
    pipeline = SegMatchPipeline(config, model)
    run_pipeline(pipeline, dataset, args.out_dir, "close-loops")
    save_map(pipeline.target_map, args.out_dir / "map.segmap")
    return 0
