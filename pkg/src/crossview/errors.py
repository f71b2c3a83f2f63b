"""Exception hierarchy shared by every module."""


class CrossViewError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class ConfigurationError(CrossViewError, ValueError):
    kind = "configuration error"


class DimensionError(CrossViewError, ValueError):
    kind = "dimension error"


class RangeError(CrossViewError, IndexError):
    kind = "range error"


class NumericError(CrossViewError, FloatingPointError):
    kind = "numeric error"


class GenerationError(CrossViewError, RuntimeError):
    kind = "generation error"


class MatrixError(CrossViewError, ValueError):
    kind = "matrix error"


class IngestionError(CrossViewError, OSError):
    kind = "ingestion error"


class CheckpointError(CrossViewError, OSError):
    kind = "checkpoint error"


class ConfigMismatchError(CheckpointError):
    kind = "config-mismatch error"


class ContractError(CrossViewError, RuntimeError):
    kind = "contract error"


class TrainingError(CrossViewError, RuntimeError):
    kind = "training error"


class MetricError(CrossViewError, ValueError):
    kind = "metric error"


class ScoreError(CrossViewError, ValueError):
    kind = "score error"


class FlowFileError(CrossViewError, OSError):
    kind = "flow file error"
