"""`make-synthetic`: write a labelled synthetic revisit sequence."""
import argparse
import logging
from pathlib import Path

import pandas as pd

from segmatch.evaluation import write_table
from segmatch.io import write_sequence
from segmatch.synthetic import generate_sequence, generate_world

logger = logging.getLogger("segmatch.cli.make_synthetic")

OBJECT_COLUMNS = ["label", "kind", "x", "y", "z", "points"]


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "make-synthetic",
        help="Generate a labelled synthetic sequence that drives part of its path twice",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  segmatch make-synthetic --out synth --seed 3
  segmatch make-synthetic --out synth --objects 60 --step 1 --noise 0.02
        """,
    )
    parser.add_argument("--out", type=Path, required=True, help="Output directory (scans/, labels/, poses.txt)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--objects", type=int, default=40, help="Number of objects along the path (default: 40)")
    parser.add_argument("--step", type=float, default=2.0, help="Meters between scans (default: 2)")
    parser.add_argument("--sensor-range", type=float, default=45.0, help="Sensor range in meters (default: 45)")
    parser.add_argument("--keep-fraction", type=float, default=0.7, help="Share of in-range points observed per scan")
    parser.add_argument("--noise", type=float, default=0.01, help="Gaussian point noise in meters (default: 0.01)")
    parser.set_defaults(handler=run, parser=parser)


def run(args: argparse.Namespace) -> int:
    world = generate_world(seed=args.seed, object_count=args.objects)
    sequence = generate_sequence(
        world,
        seed=args.seed,
        step=args.step,
        sensor_range=args.sensor_range,
        keep_fraction=args.keep_fraction,
        noise=args.noise,
    )
    dataset = write_sequence(args.out, sequence.scans, sequence.poses, sequence.labels)
    centroids = world.object_centroids()
    objects = pd.DataFrame(
        [[o.label, o.kind, *centroids[i], len(o.points)] for i, o in enumerate(world.objects)],
        columns=OBJECT_COLUMNS,
    )
    write_table(objects, args.out / "objects.csv")
    print(f"{len(dataset)} scans, {len(world.objects)} objects -> {args.out}")
    return 0
