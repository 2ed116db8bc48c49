"""Structural teacher-student normality learning for multi-class anomaly detection."""

from snl.cram import CRAM
from snl.errors import ConfigError, DivergenceError, UndefinedMetricError, UsageError
from snl.losses import LossBundle, total_loss
from snl.model import BlockSpec, TeacherStudentModel, build_model
from snl.scoring import AnomalyMap, anomaly_map, image_score

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "BlockSpec",
    "CRAM",
    "ConfigError",
    "DivergenceError",
    "LossBundle",
    "TeacherStudentModel",
    "UndefinedMetricError",
    "UsageError",
    "anomaly_map",
    "build_model",
    "image_score",
    "total_loss",
]
