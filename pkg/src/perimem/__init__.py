"""perimem: layered periodic-memory networks for lifelong response prediction.

A user's history is folded, event by event, into a small fixed-size pool of
memory slots updated at geometrically spaced periods: fast layers track the
recent past, slow layers summarize the long range. Prediction attends over
the pool with the target item as query. Training is plain numpy with
hand-written backward passes, verified against finite differences.
"""

from .baseline import SumPoolModel
from .data import (
    BehaviorEvent,
    Sample,
    UserSequence,
    Vocabulary,
    build_dataset,
    cut_time_for_fraction,
    generate_synthetic,
    load_events,
    load_samples,
    save_samples,
    split_by_time,
)
from .errors import (
    CheckpointError,
    DataFormatError,
    PerimemError,
    SamplingError,
    ScheduleError,
    ShapeError,
    StoreError,
    StoreVersionError,
    TimestampError,
    TrainingDivergedError,
    UnknownUserError,
    VocabularyError,
)
from .estimator import PeriodicMemoryClassifier, SumPoolingClassifier
from .memory import MemoryPool, UpdateSchedule
from .metrics import auc, logloss, mann_whitney_u, metrics_report, t_test
from .model import ModelConfig, ResponseModel, expand_model
from .store import MemoryStore
from .trainer import TrainConfig, evaluate_model, fit_model, grad_check_model

__version__ = "0.1.0"

__all__ = [
    "BehaviorEvent",
    "CheckpointError",
    "DataFormatError",
    "MemoryPool",
    "MemoryStore",
    "ModelConfig",
    "PerimemError",
    "PeriodicMemoryClassifier",
    "ResponseModel",
    "Sample",
    "SamplingError",
    "ScheduleError",
    "ShapeError",
    "StoreError",
    "StoreVersionError",
    "SumPoolModel",
    "SumPoolingClassifier",
    "TimestampError",
    "TrainConfig",
    "TrainingDivergedError",
    "UnknownUserError",
    "UpdateSchedule",
    "UserSequence",
    "Vocabulary",
    "VocabularyError",
    "auc",
    "build_dataset",
    "cut_time_for_fraction",
    "evaluate_model",
    "expand_model",
    "fit_model",
    "generate_synthetic",
    "grad_check_model",
    "load_events",
    "load_samples",
    "logloss",
    "mann_whitney_u",
    "metrics_report",
    "save_samples",
    "split_by_time",
    "t_test",
]
