"""Unsupervised exploit detection from hardware performance counter traces."""
from .detector import OcSvmModel, TrainConfig, anomaly_score, decision, train
from .evaluation import auc, roc
from .features import TemporalConfig, extract_nontemporal, extract_temporal, f_score, rank_events
from .preprocess import TransformParams, fit_transform, transform
from .trace_model import EventKind, EventSet, Sample, StageLabel, Trace

__version__ = "0.1.0"

__all__ = [
    "EventKind", "EventSet", "OcSvmModel", "Sample", "StageLabel", "TemporalConfig", "Trace",
    "TrainConfig", "TransformParams", "anomaly_score", "auc", "decision", "extract_nontemporal",
    "extract_temporal", "f_score", "fit_transform", "rank_events", "roc", "train", "transform",
]
