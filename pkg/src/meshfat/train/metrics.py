"""R^2 scoring and the cross-validation report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import r2_score

TISSUES = ("VAT", "ASAT")
CSV_COLUMNS = ("tissue", "model", "decimation", "fold", "r2", "r2_female", "r2_male")
TIMING_COLUMNS = ("epoch_seconds", "total_minutes")


def r2(preds, targets) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.shape != targets.shape:
        raise ValueError("preds and targets must have the same length")
    if len(targets) < 2:
        raise ValueError("r2 needs at least 2 samples")
    if np.var(targets) == 0:
        raise ValueError("r2 is undefined for constant targets")
    return float(r2_score(targets, preds))


def r2_or_nan(preds, targets) -> float:
    """``r2`` or NaN when the subgroup is too small or constant."""
    targets = np.asarray(targets, dtype=np.float64)
    if len(targets) < 2 or np.var(targets) == 0:
        return float("nan")
    return r2(preds, targets)


@dataclass
class FoldResult:
    fold: int
    r2: dict  # tissue -> R^2
    r2_female: dict  # tissue -> R^2 or NaN when unavailable
    r2_male: dict
    epoch_seconds: float
    total_minutes: float
    best_epoch: int
    n_train: int
    n_val: int
    n_test: int


def fold_metrics(fold: int, pred: np.ndarray, y: np.ndarray, sex_tags, epoch_seconds: float,
                 total_minutes: float, best_epoch: int, sizes) -> FoldResult:
    sex = np.asarray(sex_tags)
    out = {"r2": {}, "r2_female": {}, "r2_male": {}}
    for j, t in enumerate(TISSUES):
        out["r2"][t] = r2(pred[:, j], y[:, j])
        out["r2_female"][t] = r2_or_nan(pred[sex == "F", j], y[sex == "F", j])
        out["r2_male"][t] = r2_or_nan(pred[sex == "M", j], y[sex == "M", j])
    return FoldResult(fold, out["r2"], out["r2_female"], out["r2_male"], float(epoch_seconds),
                      float(total_minutes), int(best_epoch), *map(int, sizes))


def _fmt(x) -> str:
    return "" if x is None or not np.isfinite(x) else f"{x:.6f}"


def _stat(values, fn) -> float:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    return float(fn(v)) if len(v) else float("nan")


@dataclass
class MetricsReport:
    model: str
    decimation: int | None
    folds: list = field(default_factory=list)
    k: int = 5
    scheme: str = "train/val/test blocks 3/1/1"
    seed: int = 0

    def mean(self, tissue: str, key: str = "r2") -> float:
        return _stat([getattr(f, key)[tissue] for f in self.folds], np.mean)

    def std(self, tissue: str, key: str = "r2") -> float:
        return _stat([getattr(f, key)[tissue] for f in self.folds], np.std)

    @property
    def epoch_seconds(self) -> float:
        return float(np.mean([f.epoch_seconds for f in self.folds]))

    @property
    def total_minutes(self) -> float:
        return float(np.sum([f.total_minutes for f in self.folds]))

    def rows(self, timing: bool = False) -> list[dict]:
        dec = "" if self.decimation is None else str(self.decimation)
        rows = []
        for t in TISSUES:
            for f in self.folds:
                row = {"tissue": t, "model": self.model, "decimation": dec, "fold": str(f.fold),
                       "r2": _fmt(f.r2[t]), "r2_female": _fmt(f.r2_female[t]),
                       "r2_male": _fmt(f.r2_male[t])}
                if timing:
                    row["epoch_seconds"] = f"{f.epoch_seconds:.6f}"
                    row["total_minutes"] = f"{f.total_minutes:.6f}"
                rows.append(row)
            for name, fn in (("mean", self.mean), ("std", self.std)):
                row = {"tissue": t, "model": self.model, "decimation": dec, "fold": name,
                       "r2": _fmt(fn(t)), "r2_female": _fmt(fn(t, "r2_female")),
                       "r2_male": _fmt(fn(t, "r2_male"))}
                if timing:
                    row["epoch_seconds"] = f"{self.epoch_seconds:.6f}" if name == "mean" else ""
                    row["total_minutes"] = f"{self.total_minutes:.6f}" if name == "mean" else ""
                rows.append(row)
        return rows

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, float) and not np.isfinite(x):
                return None
            return x

        d = asdict(self)
        d["folds"] = [clean(f) for f in d["folds"]]
        d["summary"] = {t: {"r2_mean": self.mean(t), "r2_std": self.std(t)} for t in TISSUES}
        return clean(d)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def nan(x):
            return {k: (float("nan") if v is None else v) for k, v in x.items()}

        folds = [FoldResult(**{**f, "r2": nan(f["r2"]), "r2_female": nan(f["r2_female"]),
                               "r2_male": nan(f["r2_male"])}) for f in d["folds"]]
        return cls(d["model"], d["decimation"], folds, d["k"], d["scheme"], d["seed"])


def write_report_json(path, report: MetricsReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return path


def read_report_json(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def csv_text(reports, timing: bool = False) -> str:
    cols = CSV_COLUMNS + (TIMING_COLUMNS if timing else ())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerows(r.rows(timing))
    return buf.getvalue()


def write_metrics_csv(path, reports, timing: bool = False) -> Path:
    """Metrics table; without ``timing`` the file is bit-reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(reports, timing))
    return path
