"""Sparse two-view point transformer for hit-level event segmentation."""

from .errors import (
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    DataError,
    HPSTError,
    IncompatibleError,
    MalformedRecord,
)
from .estimator import HPSTSegmenter, check_events
from .events import CLASS_NAMES, Event, Hit, View, read_events, validate_event, write_events
from .model import HyperParams, init_weights, predict
from .synthgen import GenConfig, generate_dataset, generate_events
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ConfigError",
    "ConfigMismatch",
    "CorruptCheckpoint",
    "DataError",
    "Event",
    "GenConfig",
    "HPSTError",
    "HPSTSegmenter",
    "Hit",
    "HyperParams",
    "IncompatibleError",
    "MalformedRecord",
    "TrainConfig",
    "View",
    "check_events",
    "generate_dataset",
    "generate_events",
    "init_weights",
    "load_checkpoint",
    "predict",
    "read_events",
    "save_checkpoint",
    "train",
    "validate_event",
    "write_events",
]
