"""Loss, optimiser, splits, metrics and cross-validated training."""
from .cv import CohortData, SweepResult, TrainConfig, timing_sweep, train_model
from .loop import NonFiniteLossError, TrainHistory, fit_network
from .loss import ShrinkageCfg, shrinkage_loss
from .metrics import (FoldResult, MetricsReport, csv_text, fold_metrics, r2, read_report_json,
                      write_metrics_csv, write_report_json)
from .optim import Adam, AdamCfg, adam_step
from .split import Fold, FoldSplit, kfold_split

__all__ = [
    "CohortData", "SweepResult", "TrainConfig", "timing_sweep", "train_model",
    "NonFiniteLossError", "TrainHistory", "fit_network", "ShrinkageCfg", "shrinkage_loss",
    "FoldResult", "MetricsReport", "csv_text", "fold_metrics", "r2", "read_report_json",
    "write_metrics_csv", "write_report_json", "Adam", "AdamCfg", "adam_step",
    "Fold", "FoldSplit", "kfold_split",
]
