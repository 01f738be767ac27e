"""`eval`: records -> P(x) and timing tables; scores -> ROC table."""
import argparse
import logging
from pathlib import Path

from segmatch.evaluation import (
    OPERATING_FPR,
    detection_flags_from_records,
    localization_probability,
    localization_table,
    read_table,
    records_from_table,
    roc_curve_from_arrays,
    roc_table,
    threshold_at_fpr,
    timing_report,
    write_table,
)

from .common import output_dir

logger = logging.getLogger("segmatch.cli.eval")


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "eval",
        help="Compute ROC, localization probability and timing tables",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  segmatch eval --records run1/records.csv --out-dir run1/eval
  segmatch eval --scores scores.csv --operating-fpr 0.2 --out-dir eval
        """,
    )
    parser.add_argument("--records", type=Path, help="records.csv written by localize or close-loops")
    parser.add_argument("--scores", type=Path, help="(score,label) CSV written by train --scores")
    parser.add_argument("--operating-fpr", type=float, default=OPERATING_FPR,
                        help=f"False positive rate of the reported operating point (default: {OPERATING_FPR})")
    parser.add_argument("--out-dir", type=Path, required=True, help="Directory for the output tables")
    parser.set_defaults(handler=run, parser=parser)


def _evaluate_records(path: Path, out_dir: Path) -> None:
    records = records_from_table(read_table(path))
    flags = detection_flags_from_records(records)
    curve = localization_probability(flags)
    write_table(localization_table(curve), out_dir / "localization.csv")
    print(f"{len(records)} records, {int(curve.total_distance)} m travelled, "
          f"{int(flags.sum())} m with a true detection")
    if len(records) >= 2:
        write_table(timing_report(records), out_dir / "timing.csv")
    else:
        logger.warning("Fewer than 2 records: no timing table")


def _evaluate_scores(path: Path, operating_fpr: float, out_dir: Path) -> None:
    table = read_table(path)
    curve = roc_curve_from_arrays(table["score"].to_numpy(), table["label"].to_numpy().astype(bool), operating_fpr)
    write_table(roc_table(curve), out_dir / "roc.csv")
    fpr, tpr, threshold = curve.operating_point
    print(f"AUC {curve.auc:.4f}; operating point fpr={fpr:.3f} tpr={tpr:.3f} threshold={threshold:.4f}; "
          f"threshold at fpr<={operating_fpr}: {threshold_at_fpr(curve, operating_fpr):.4f}")


def run(args: argparse.Namespace) -> int:
    if args.records is None and args.scores is None:
        args.parser.error("give --records, --scores or both")
    out_dir = output_dir(args.out_dir)
    if args.records is not None:
        _evaluate_records(args.records, out_dir)
    if args.scores is not None:
        _evaluate_scores(args.scores, args.operating_fpr, out_dir)
    return 0
