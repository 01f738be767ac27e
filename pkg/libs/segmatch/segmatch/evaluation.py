"""Classifier ROC, localization probability P(x) and per-stage timing tables."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import EvaluationError
from .models import LoopClosure
from .schemas import TIMED_STAGES, EvalRecord

logger = logging.getLogger("segmatch.evaluation")

OPERATING_FPR = 0.2

ROC_COLUMNS = ["fpr", "tpr", "threshold", "operating_point"]
LOCALIZATION_COLUMNS = ["distance_m", "probability"]
TIMING_COLUMNS = ["stage", "mean_ms", "std_ms"]
RECORD_COLUMNS = [
    "scan_index", "travelled", "distance_since_detection", "outcome", "consensus_size",
    "source_segments", "target_segments", "candidate_matches",
] + [f"{stage.value}_ms" for stage in TIMED_STAGES]
CLOSURE_COLUMNS = ["scan_index", "consensus_size", "tx", "ty", "tz", "rotation_deg", "max_residual"]
SCORE_COLUMNS = ["score", "label"]


# --- ROC ---

@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    operating_index: int

    @property
    def operating_point(self) -> Tuple[float, float, float]:
        i = self.operating_index
        return float(self.fpr[i]), float(self.tpr[i]), float(self.thresholds[i])

    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def roc_curve_from_arrays(scores: Sequence[float], labels: Sequence[bool],
                          operating_fpr: float = OPERATING_FPR) -> RocCurve:
    """Sweep every unique score as a threshold (accept score >= threshold).

    The curve starts at (0, 0) with threshold +inf; AUC is the trapezoidal area.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if len(scores) != len(labels):
        raise EvaluationError(f"{len(scores)} scores for {len(labels)} labels")
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError(f"ROC needs both labels (positives={positives}, negatives={negatives})")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last position of every distinct score in descending order
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0)
    ends = np.concatenate([boundaries, [len(sorted_scores) - 1]])
    tp = np.cumsum(sorted_labels)[ends]
    fp = np.cumsum(~sorted_labels)[ends]
    fpr = np.concatenate([[0.0], fp / negatives])
    tpr = np.concatenate([[0.0], tp / positives])
    thresholds = np.concatenate([[np.inf], sorted_scores[ends]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    operating_index = int(np.argmin(np.abs(fpr - operating_fpr)))
    return RocCurve(fpr, tpr, thresholds, auc, operating_index)


def roc_curve(samples: Iterable[Tuple[float, bool]], operating_fpr: float = OPERATING_FPR) -> RocCurve:
    samples = list(samples)
    if not samples:
        raise EvaluationError("ROC needs at least one scored sample")
    scores, labels = zip(*samples)
    return roc_curve_from_arrays(scores, labels, operating_fpr)


def threshold_at_fpr(curve: RocCurve, fpr: float = OPERATING_FPR) -> float:
    """Lowest threshold whose false positive rate does not exceed fpr."""
    admissible = np.flatnonzero(curve.fpr <= fpr)
    return float(curve.thresholds[admissible[-1]])


def roc_table(curve: RocCurve) -> pd.DataFrame:
    frame = pd.DataFrame({"fpr": curve.fpr, "tpr": curve.tpr, "threshold": curve.thresholds})
    frame["operating_point"] = False
    frame.loc[curve.operating_index, "operating_point"] = True
    return frame[ROC_COLUMNS]


# --- Localization probability ---

@dataclass(frozen=True, eq=False)
class LocalizationCurve:
    distances: np.ndarray
    probabilities: np.ndarray
    total_distance: float
    stretches: np.ndarray

    def at(self, x: float) -> float:
        return probability_at(self.stretches, self.total_distance, x)


def no_detection_stretches(flags: Sequence[bool]) -> np.ndarray:
    """Lengths (meters) of the maximal runs of meters without a detection."""
    flags = np.asarray(flags, dtype=bool)
    padded = np.concatenate([[True], flags, [True]])
    changes = np.flatnonzero(np.diff(padded.astype(np.int8)))
    starts, ends = changes[0::2], changes[1::2]
    return (ends - starts).astype(np.float64)


def probability_at(stretches: np.ndarray, total_distance: float, x: float) -> float:
    return float(stretches[stretches >= x].sum() / total_distance)


def localization_probability(flags: Sequence[bool], grid: Optional[Sequence[float]] = None) -> LocalizationCurve:
    """P(x): share of the travelled distance spent in no-detection stretches of at least x meters.

    flags holds one entry per meter travelled, True where a detection happened.
    """
    flags = np.asarray(flags, dtype=bool)
    total = float(len(flags))
    if total <= 0:
        raise EvaluationError("localization probability needs a positive travelled distance")
    stretches = no_detection_stretches(flags)
    if grid is None:
        longest = int(stretches.max()) if len(stretches) else 0
        grid = np.arange(0, longest + 2, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    probabilities = np.array([probability_at(stretches, total, x) for x in grid])
    return LocalizationCurve(grid, probabilities, total, stretches)


def detection_flags_from_records(records: Sequence[EvalRecord]) -> np.ndarray:
    """Per-meter flags: meter m is True when a true detection happened within [m, m + 1)."""
    odometer = np.cumsum([r.travelled for r in records]) if records else np.empty(0)
    meters = int(np.floor(odometer[-1])) if len(odometer) else 0
    flags = np.zeros(meters, dtype=bool)
    for position, record in zip(odometer, records):
        if record.detected and meters:
            flags[min(int(np.floor(position)), meters - 1)] = True
    return flags


def localization_table(curve: LocalizationCurve) -> pd.DataFrame:
    return pd.DataFrame({"distance_m": curve.distances, "probability": curve.probabilities})[LOCALIZATION_COLUMNS]


# --- Timing ---

def timing_report(records: Sequence[EvalRecord]) -> pd.DataFrame:
    """Per-stage mean and sample standard deviation in ms, plus the total row."""
    if len(records) < 2:
        raise EvaluationError(f"timing report needs at least 2 records, got {len(records)}")
    stage_times = pd.DataFrame(
        [[r.timings_ms.get(stage, 0.0) for stage in TIMED_STAGES] for r in records],
        columns=[stage.value for stage in TIMED_STAGES],
    )
    rows = [(name, stage_times[name].mean(), stage_times[name].std(ddof=1)) for name in stage_times.columns]
    totals = stage_times.sum(axis=1)
    rows.append(("total", float(stage_times.mean().sum()), totals.std(ddof=1)))
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)


# --- Records and closures ---

def records_table(records: Sequence[EvalRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {
            "scan_index": r.scan_index,
            "travelled": r.travelled,
            "distance_since_detection": r.distance_since_detection,
            "outcome": r.outcome.value,
            "consensus_size": r.consensus_size,
            "source_segments": r.source_segments,
            "target_segments": r.target_segments,
            "candidate_matches": r.candidate_matches,
        }
        for stage in TIMED_STAGES:
            row[f"{stage.value}_ms"] = r.timings_ms.get(stage, 0.0)
        rows.append(row)
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def records_from_table(frame: pd.DataFrame) -> List[EvalRecord]:
    missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
    if missing:
        raise EvaluationError(f"records table is missing columns: {', '.join(missing)}")
    records = []
    for row in frame.to_dict(orient="records"):
        timings = {stage: float(row[f"{stage.value}_ms"]) for stage in TIMED_STAGES}
        fields = {k: row[k] for k in RECORD_COLUMNS[:8]}
        records.append(EvalRecord(**fields, timings_ms=timings))
    return records


def closures_table(closures: Sequence[LoopClosure]) -> pd.DataFrame:
    rows = []
    for c in closures:
        residuals = c.residuals()
        rows.append({
            "scan_index": c.source_scan_index,
            "consensus_size": c.consensus_size,
            "tx": c.transform.translation[0],
            "ty": c.transform.translation[1],
            "tz": c.transform.translation[2],
            "rotation_deg": float(np.degrees(c.transform.rotation_angle())),
            "max_residual": float(residuals.max()) if len(residuals) else 0.0,
        })
    return pd.DataFrame(rows, columns=CLOSURE_COLUMNS)


def scores_table(scores: Sequence[float], labels: Sequence[bool]) -> pd.DataFrame:
    return pd.DataFrame({"score": np.asarray(scores, dtype=np.float64), "label": np.asarray(labels, dtype=int)})


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> None:
    frame.to_csv(path, index=False, float_format="%.10g")
    logger.info(f"Wrote {len(frame)} rows to {path}")


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise EvaluationError(f"{path}: cannot read table: {e}") from e
