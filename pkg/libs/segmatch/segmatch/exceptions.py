from typing import Optional


class SegMatchError(Exception):
    """Base class for every error raised by the segmatch library."""


class ParameterError(SegMatchError, ValueError):
    """An operation was called with an out-of-range parameter."""


class ConfigError(SegMatchError, ValueError):
    """The run configuration file is malformed or names an unknown key."""


class PointCloudFormatError(SegMatchError):
    """A point cloud file could not be parsed."""


class DatasetError(SegMatchError):
    """A sequence dataset (scan directory + pose file) is inconsistent."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class PoseError(SegMatchError, ValueError):
    """A rotation is not orthonormal or has a negative determinant."""


class DescriptorError(SegMatchError):
    """A segment cannot be described (too few points, bad sample count)."""


class UndescribedSegmentError(SegMatchError):
    """A segment without a feature vector reached an operation that needs one."""


class TrainingError(SegMatchError):
    """The classifier could not be trained on the given set."""


class ModelFormatError(SegMatchError):
    """A model file is corrupted or truncated."""


class ModelVersionError(ModelFormatError):
    """A model file was written by an unsupported format version."""


class ModelIncompatibleError(SegMatchError):
    """A model was trained on a different pair-feature layout."""


class ClassifierError(SegMatchError):
    """Candidate classification was requested without a usable classifier."""


class DegenerateConfigurationError(SegMatchError):
    """Correspondences are collinear or coincident; no unique rigid transform."""


class TrajectoryError(SegMatchError):
    """A trajectory does not cover a requested scan index."""


class MapFormatError(SegMatchError):
    """A target map file is corrupted, truncated or of an unknown version."""


class DuplicateSegmentIdError(SegMatchError):
    """A segment id collides with one already stored in the target map."""


class EvaluationError(SegMatchError):
    """Evaluation inputs are insufficient (single class, too few records)."""


class StageError(SegMatchError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
