"""Hybrid CNN-LSTM binary intrusion detection for SCADA flow statistics, built on numpy."""

from .config import RunConfig
from .data import FlowTable, generate_synthetic, load_csv
from .errors import IdsError
from .evaluation import crossval, evaluate
from .metrics import confusion, metrics
from .model import ArchitectureConfig, HybridModel, build_model, forward, load_model, predict, predict_proba, save_model
from .optim import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "FlowTable", "HybridModel", "IdsError", "RunConfig", "TrainConfig",
    "build_model", "confusion", "crossval", "evaluate", "forward", "generate_synthetic", "load_csv",
    "load_model", "metrics", "predict", "predict_proba", "save_model", "train",
]
