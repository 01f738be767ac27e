"""`segment`: one point cloud -> segment summary table."""
import argparse
import logging
from pathlib import Path

import pandas as pd

from segmatch.cloud import voxel_grid_filter
from segmatch.descriptors import describe_segments
from segmatch.evaluation import write_table
from segmatch.io import read_point_cloud, write_point_cloud
from segmatch.models import EIGEN_FEATURE_NAMES
from segmatch.schemas import SegmenterKind
from segmatch.segmentation import remove_ground, segment_cloud

from .common import add_config_arguments, output_dir, resolve_config

logger = logging.getLogger("segmatch.cli.segment")

SEGMENT_COLUMNS = ["segment_id", "points", "cx", "cy", "cz"]


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "segment",
        help="Segment a single point cloud",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  segmatch segment --cloud scan.segpc --out segments.csv
  segmatch segment --cloud 000000.bin --describe --clouds-dir segments/
        """,
    )
    add_config_arguments(parser)
    parser.add_argument("--cloud", type=Path, required=True, help="Point cloud file (.segpc, .bin, .txt, .xyz)")
    parser.add_argument("--out", type=Path, help="Write one row per segment to this CSV")
    parser.add_argument("--clouds-dir", type=Path, help="Write every segment as a SEGPC1 cloud into this directory")
    parser.add_argument("--describe", action="store_true", help="Add the eigenvalue features to the table")
    parser.add_argument("--skip-voxel-filter", action="store_true", help="Segment the raw points")
    parser.add_argument("--skip-ground-removal", action="store_true", help="Keep ground points")
    parser.set_defaults(handler=run, parser=parser)


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    cloud = read_point_cloud(args.cloud)
    logger.info(f"Read {len(cloud)} points from {args.cloud}")
    if not args.skip_voxel_filter:
        cloud = voxel_grid_filter(cloud, config.voxel_leaf, config.min_points_per_voxel)
    params = config.segmentation_params()
    if not args.skip_ground_removal:
        cloud = remove_ground(cloud, params)
    growing = config.region_growing_params() if config.segmenter is SegmenterKind.REGION_GROWING else None
    segments = segment_cloud(cloud, params, growing)
    print(f"{len(segments)} segments")

    rows = [[s.id, len(s), *s.centroid] for s in segments]
    table = pd.DataFrame(rows, columns=SEGMENT_COLUMNS)
    if args.describe:
        described = describe_segments(segments, config.descriptor_params(with_shapes=False))
        eigen = pd.DataFrame([s.feature.eigen for s in described], columns=list(EIGEN_FEATURE_NAMES))
        table = pd.concat([table, eigen], axis=1)
    if args.out is not None:
        write_table(table, args.out)
    if args.clouds_dir is not None:
        directory = output_dir(args.clouds_dir)
        for s in segments:
            write_point_cloud(s.points, directory / f"segment_{s.id:06d}.segpc")
    return 0
