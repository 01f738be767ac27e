"""`train`: labelled segment pairs from a revisit sequence -> SEGRF1 forest model."""
import argparse
import logging
from pathlib import Path

from segmatch.evaluation import roc_curve_from_arrays, scores_table, write_table
from segmatch.forest import save_model, train_with_params
from segmatch.io import load_sequence
from segmatch.pipeline import generate_training_pairs

from .common import add_config_arguments, add_sequence_arguments, progress, resolve_config

logger = logging.getLogger("segmatch.cli.train")


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "train",
        help="Train the segment-pair classifier on a sequence with ground-truth poses",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  segmatch train --scans data/00/scans --poses data/00/poses.txt --model forest.segrf
  segmatch train --scans data/00/scans --poses data/00/poses.txt --model forest.segrf \\
      --holdout 0.2 --scores scores.csv --set forest_feature_set=eigen
        """,
    )
    add_sequence_arguments(parser)
    add_config_arguments(parser)
    parser.add_argument("--model", type=Path, required=True, help="Output model file")
    parser.add_argument("--holdout", type=float, default=0.0,
                        help="Fraction of pairs kept out of training and scored (default: 0, train on all)")
    parser.add_argument("--scores", type=Path, help="Write held-out (score,label) rows here; needs --holdout")
    parser.set_defaults(handler=run, parser=parser)


def run(args: argparse.Namespace) -> int:
    if args.scores is not None and not args.holdout:
        args.parser.error("--scores needs a --holdout fraction")
    config = resolve_config(args)
    dataset = load_sequence(args.scans, args.poses)
    training_set = generate_training_pairs(progress(dataset, len(dataset), "pairs"), config)

    held_out = None
    if args.holdout:
        training_set, held_out = training_set.split(args.holdout, config.training_seed)
    model = train_with_params(training_set, config.forest_params())
    save_model(model, args.model)
    print(f"Trained {model.n_trees} trees on {len(training_set)} pairs "
          f"({training_set.positives} positive) -> {args.model}")

    if held_out is not None and len(held_out):
        scores = model.score_many(held_out.features)
        if args.scores is not None:
            write_table(scores_table(scores, held_out.labels), args.scores)
        if 0 < held_out.positives < len(held_out):
            curve = roc_curve_from_arrays(scores, held_out.labels)
            print(f"Held-out AUC {curve.auc:.4f} on {len(held_out)} pairs")
        else:
            logger.warning("Held-out split contains a single class; no ROC computed")
    return 0
