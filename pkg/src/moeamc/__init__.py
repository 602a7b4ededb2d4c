"""Mixture-of-experts automatic modulation classification on synthetic I/Q data."""

from .models import HSRM, LSRM, Gate, GateConfig, HsrmConfig, LsrmConfig, ModelBundle, MoEAMC, build_model, classify
from .report import SnrMetrics, accuracy_by_snr, average_accuracy, emit_report
from .sigsynth import (
    Dataset,
    DatasetSpec,
    IQFrame,
    LabeledExample,
    ModulationScheme,
    apply_awgn,
    generate_dataset,
    load_dataset,
    modulate,
    save_dataset,
    split_dataset,
)
from .trainer import TrainConfig, TrainHistory, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "HSRM",
    "LSRM",
    "Gate",
    "GateConfig",
    "HsrmConfig",
    "LsrmConfig",
    "ModelBundle",
    "MoEAMC",
    "build_model",
    "classify",
    "SnrMetrics",
    "accuracy_by_snr",
    "average_accuracy",
    "emit_report",
    "Dataset",
    "DatasetSpec",
    "IQFrame",
    "LabeledExample",
    "ModulationScheme",
    "apply_awgn",
    "generate_dataset",
    "load_dataset",
    "modulate",
    "save_dataset",
    "split_dataset",
    "TrainConfig",
    "TrainHistory",
    "evaluate",
    "train",
]
