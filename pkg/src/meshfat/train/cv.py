"""Cross-validated training runs and the face-count timing sweep."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import linregress

from .metrics import MetricsReport, fold_metrics
from .split import FoldSplit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    hidden: int = 64
    shrink_a: float = 10.0
    shrink_c: float = 0.2
    bn_momentum: float = 0.1
    channels: tuple = (16, 32, 64)
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 2:
            raise ValueError("epochs, batch_size must be >= 1 and hidden >= 2")


@dataclass
class CohortData:
    """Inputs and labels of one cohort for one model kind.

    ``inputs`` is a list of graphs (GNN) or an image array (CNN).
    """

    inputs: object
    y: np.ndarray
    sex_tags: list
    subject_ids: list
    decimation: int | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1, 2)
        n = len(self.y)
        if len(self.inputs) != n or len(self.sex_tags) != n or len(self.subject_ids) != n:
            raise ValueError("inputs, targets, sex tags and ids must have equal length")

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        inputs = (self.inputs[idx] if isinstance(self.inputs, np.ndarray)
                  else [self.inputs[i] for i in idx])
        return CohortData(inputs, self.y[idx], [self.sex_tags[i] for i in idx],
                          [self.subject_ids[i] for i in idx], self.decimation)


def make_estimator(kind: str, cfg: TrainConfig):
    from ..estimators import SageRegressor, SilhouetteCnnRegressor

    if kind == "gnn":
        return SageRegressor(hidden=cfg.hidden, epochs=cfg.epochs, batch_size=cfg.batch_size,
                             lr=cfg.lr, shrink_a=cfg.shrink_a, shrink_c=cfg.shrink_c,
                             bn_momentum=cfg.bn_momentum, lr_schedule=cfg.lr_schedule,
                             random_state=cfg.seed)
    if kind == "cnn":
        return SilhouetteCnnRegressor(channels=tuple(cfg.channels), hidden=cfg.hidden,
                                      epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                                      shrink_a=cfg.shrink_a, shrink_c=cfg.shrink_c,
                                      lr_schedule=cfg.lr_schedule, random_state=cfg.seed)
    raise ValueError(f"unknown model kind {kind!r}")


def train_model(data: CohortData, model_kind: str, cfg: TrainConfig, folds: FoldSplit, *,
                only_folds: Sequence[int] | None = None,
                monitor: Callable[[str, int, np.ndarray], None] | None = None,
                keep_models: list | None = None) -> MetricsReport:
    """Train and test one model per fold.

    ``monitor(event, fold, indices)`` is called with ``"fit"`` (training
    and validation indices) before fitting and ``"test"`` just before the
    test block is first touched.
    """
    report = MetricsReport(model=model_kind, decimation=data.decimation, k=folds.k,
                           scheme=folds.scheme, seed=folds.seed)
    for i, fold in enumerate(folds):
        if only_folds is not None and i not in only_folds:
            continue
        if monitor:
            monitor("fit", i, np.concatenate([fold.train, fold.val]))
        train, val = data.take(fold.train), data.take(fold.val)
        est = make_estimator(model_kind, cfg)
        est.fit(train.inputs, train.y, validation=(val.inputs, val.y))
        if monitor:
            monitor("test", i, fold.test)
        test = data.take(fold.test)
        pred = est.predict(test.inputs)
        hist = est.history_
        report.folds.append(fold_metrics(i, pred, test.y, test.sex_tags, hist.mean_epoch_seconds,
                                         hist.total_seconds / 60.0, hist.best_epoch,
                                         (len(train), len(val), len(test))))
        if keep_models is not None:
            keep_models.append(est)
        log.info("%s fold %d: R2 VAT %.3f ASAT %.3f (%.1fs)", model_kind, i,
                 report.folds[-1].r2["VAT"], report.folds[-1].r2["ASAT"], hist.total_seconds)
    return report


@dataclass
class SweepResult:
    levels: list = field(default_factory=list)  # nominal face budget
    faces: list = field(default_factory=list)  # mean actual face count
    epoch_seconds: list = field(default_factory=list)
    r2_vat: list = field(default_factory=list)
    r2_asat: list = field(default_factory=list)
    energy_wh: list = field(default_factory=list)
    slope: float = float("nan")  # seconds per face
    intercept: float = float("nan")
    fit_r2: float = float("nan")

    def strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.epoch_seconds) > 0))

    def rows(self) -> list[dict]:
        return [{"decimation": l, "faces": f"{f:.1f}", "epoch_seconds": f"{t:.6f}",
                 "r2_vat": f"{a:.6f}", "r2_asat": f"{b:.6f}", "energy_wh": f"{e:.6f}"}
                for l, f, t, a, b, e in zip(self.levels, self.faces, self.epoch_seconds,
                                            self.r2_vat, self.r2_asat, self.energy_wh)]


def timing_sweep(datasets: dict, cfg: TrainConfig, folds: FoldSplit, *,
                 decimations=(100, 200, 500, 1000, 5000, 10000), faces: dict | None = None,
                 wattage: float = 65.0, only_folds=(0,)) -> SweepResult:
    """Per-epoch GNN training time and test R^2 at each decimation level.

    ``datasets`` maps level to :class:`CohortData`; ``faces`` optionally maps
    level to the mean face count (defaults to the level itself).  Energy is
    the configured wattage times the training time.
    """
    out = SweepResult()
    for level in decimations:
        if level not in datasets:
            warnings.warn(f"no data for decimation level {level}; skipped", stacklevel=2)
            continue
        data = replace(datasets[level], decimation=level)
        models: list = []
        rep = train_model(data, "gnn", cfg, folds, only_folds=only_folds, keep_models=models)
        # median over all timed epochs damps scheduler noise and one-off warm-up costs
        per_epoch = float(np.median(np.concatenate([m.history_.epoch_seconds for m in models])))
        out.levels.append(level)
        out.faces.append(float(faces[level]) if faces else float(level))
        out.epoch_seconds.append(per_epoch)
        out.r2_vat.append(rep.mean("VAT"))
        out.r2_asat.append(rep.mean("ASAT"))
        out.energy_wh.append(wattage * rep.total_minutes / 60.0)
    if len(out.levels) >= 2:
        fit = linregress(out.faces, out.epoch_seconds)
        out.slope, out.intercept, out.fit_r2 = float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)
    return out
