"""Arguments and helpers shared by the subcommands."""
import argparse
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional

from tqdm import tqdm

from segmatch.config import load_config, parse_overrides
from segmatch.evaluation import closures_table, records_table, write_table
from segmatch.exceptions import ConfigError
from segmatch.forest import ForestModel, load_model
from segmatch.schemas import ClassifierKind, DetectionOutcome, PipelineConfig

from config import SHOW_PROGRESS

logger = logging.getLogger("segmatch.cli")


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Run configuration file (key = value per line)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override one configuration key; may be repeated",
    )


def add_sequence_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scans", type=Path, required=True, help="Directory of scan files, sorted by name")
    parser.add_argument("--poses", type=Path, required=True, help="Ground-truth pose file, one 3x4 row per scan")


def resolve_config(args: argparse.Namespace, forced: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """Config file, then --set overrides, then keys the subcommand pins."""
    overrides = parse_overrides(args.overrides)
    overrides.update(forced or {})
    return load_config(args.config, overrides)


def load_run_model(path: Optional[Path], config: PipelineConfig) -> Optional[ForestModel]:
    if config.classifier is not ClassifierKind.FOREST:
        if path is not None:
            logger.warning(f"Ignoring --model {path}: classifier is {config.classifier.value}")
        return None
    if path is None:
        raise ConfigError("classifier=forest needs a trained model (--model)")
    return load_model(path, expected_feature_count=config.forest_feature_set.column_count)


def progress(iterable: Iterable, total: int, desc: str):
    return tqdm(iterable, total=total, desc=desc, unit="scan", disable=not SHOW_PROGRESS)


def output_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_pipeline(pipeline, dataset, out_dir: Path, desc: str) -> None:
    """Drive the pipeline over the dataset and write records.csv and closures.csv."""
    for _ in pipeline.run(progress(dataset, len(dataset), desc)):
        pass
    out_dir = output_dir(out_dir)
    write_table(records_table(pipeline.records), out_dir / "records.csv")
    write_table(closures_table(pipeline.closures), out_dir / "closures.csv")
    true_positives = sum(r.outcome is DetectionOutcome.TRUE_POSITIVE for r in pipeline.records)
    print(f"{len(pipeline.records)} scans processed, {len(pipeline.closures)} closures "
          f"({true_positives} true positive) -> {out_dir}")
