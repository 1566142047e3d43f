"""End-to-end pipeline: data, supernet training, search, retraining, evaluation."""

from groupbnn.pipeline.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from groupbnn.pipeline.config import RunConfig, load_run_config
from groupbnn.pipeline.data import (
    CountMismatchError,
    DataError,
    DatasetSplit,
    MagicError,
    TruncatedError,
    load_dataset,
    load_idx_dataset,
)
from groupbnn.pipeline.stages import evaluate, report_flops, retrain, search, train_supernet

__all__ = [
    "Checkpoint", "CountMismatchError", "DataError", "DatasetSplit", "MagicError", "RunConfig",
    "TruncatedError", "evaluate", "load_checkpoint", "load_dataset", "load_idx_dataset",
    "load_run_config", "report_flops", "retrain", "save_checkpoint", "search", "train_supernet",
]
