"""scikit-learn style estimators over the pipeline stages.

Transformers map lists of volumes or meshes to lists of meshes; the two
regressors predict ``(VAT, ASAT)`` in mm^3 from graphs or silhouette images.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted

from .graph import RegressionGraph, batch
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.models import CnnModel, GnnModel
from .register import apply_transform, icp, select_reference
from .surface.decimate import decimate
from .surface.marching_cubes import marching_cubes
from .surface.mesh import TriangleMesh
from .train.loop import TrainHistory, evaluate_loss, fit_network
from .train.loss import ShrinkageCfg
from .train.optim import AdamCfg
from .volume import VoxelVolume, segment_body

EVAL_BATCH = 64


# ---------------------------------------------------------------------------
# Input validation helpers
# ---------------------------------------------------------------------------

def check_volumes(X) -> list[VoxelVolume]:
    X = list(X) if not isinstance(X, VoxelVolume) else [X]
    if not X:
        raise ValueError("expected at least one volume")
    for i, v in enumerate(X):
        if not isinstance(v, VoxelVolume):
            raise TypeError(f"item {i} is {type(v).__name__}, expected VoxelVolume")
    return X


def check_meshes(X) -> list[TriangleMesh]:
    X = list(X) if not isinstance(X, TriangleMesh) else [X]
    if not X:
        raise ValueError("expected at least one mesh")
    for i, m in enumerate(X):
        if not isinstance(m, TriangleMesh):
            raise TypeError(f"item {i} is {type(m).__name__}, expected TriangleMesh")
    return X


def check_graphs(X, n_features: int | None = None) -> list[RegressionGraph]:
    X = list(X) if not isinstance(X, RegressionGraph) else [X]
    if not X:
        raise ValueError("expected at least one graph")
    for i, g in enumerate(X):
        if not isinstance(g, RegressionGraph):
            raise TypeError(f"item {i} is {type(g).__name__}, expected RegressionGraph")
        if not np.all(np.isfinite(g.x)):
            raise ValueError(f"graph {i} has non-finite node features")
    d = X[0].x.shape[1] if n_features is None else n_features
    bad = [i for i, g in enumerate(X) if g.x.shape[1] != d]
    if bad:
        raise ValueError(f"graph {bad[0]} has {X[bad[0]].x.shape[1]} node features, expected {d}")
    return X


def check_images(X, shape: tuple | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, channels, height, width), got {X.shape}")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ValueError(f"expected images of shape (n, {tuple(shape)}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_targets(y, n: int) -> np.ndarray:
    y = check_array(y, ensure_2d=False, dtype=np.float64)
    y = y.reshape(len(y), -1) if y.ndim == 1 else y
    if y.shape != (n, 2):
        raise ValueError(f"expected targets of shape ({n}, 2), got {y.shape}")
    return y


# ---------------------------------------------------------------------------
# Geometry transformers
# ---------------------------------------------------------------------------

class SurfaceExtractor(TransformerMixin, BaseEstimator):
    """Volumes to closed surface meshes (optional clean-up, then marching cubes)."""

    def __init__(self, isolevel: float = 0.5, segment: bool = True, close_radius: int = 2):
        self.isolevel = isolevel
        self.segment = segment
        self.close_radius = close_radius

    def fit(self, X=None, y=None):
        self.is_fitted_ = True
        return self

    def transform(self, X) -> list[TriangleMesh]:
        out = []
        for v in check_volumes(X):
            if self.segment:
                v = segment_body(v, self.close_radius)
            out.append(marching_cubes(v.pad(1), self.isolevel, origin=tuple(-np.asarray(v.spacing))))
        return out


class MeshDecimator(TransformerMixin, BaseEstimator):
    def __init__(self, target_faces: int = 1000, preserve_volume: bool = True):
        self.target_faces = target_faces
        self.preserve_volume = preserve_volume

    def fit(self, X=None, y=None):
        self.is_fitted_ = True
        return self

    def transform(self, X) -> list[TriangleMesh]:
        return [decimate(m, self.target_faces, self.preserve_volume) for m in check_meshes(X)]


class IcpRegistrar(TransformerMixin, BaseEstimator):
    """Registers meshes rigidly onto a reference mesh.

    ``fit`` picks the reference: the most average subject when ``labels`` are
    given, otherwise ``reference_index``.
    """

    def __init__(self, max_iters: int = 50, tol: float = 1e-6, reference_index: int = 0):
        self.max_iters = max_iters
        self.tol = tol
        self.reference_index = reference_index

    def fit(self, X, y=None, labels=None):
        X = check_meshes(X)
        if labels is not None:
            if len(labels) != len(X):
                raise ValueError("labels must align with meshes")
            ref_id = select_reference(labels)
            idx = [l.subject_id for l in labels].index(ref_id)
        else:
            idx = self.reference_index
        self.reference_ = X[idx]
        self.reference_index_ = idx
        return self

    def transform(self, X) -> list[TriangleMesh]:
        check_is_fitted(self, "reference_")
        X = check_meshes(X)
        self.reports_ = [icp(m, self.reference_, self.max_iters, self.tol) for m in X]
        return [apply_transform(m, r.transform) for m, r in zip(X, self.reports_)]


# ---------------------------------------------------------------------------
# Regressors
# ---------------------------------------------------------------------------

def _scaler_state(s: StandardScaler) -> dict:
    return {"mean": s.mean_.tolist(), "scale": s.scale_.tolist(), "var": s.var_.tolist(),
            "n_samples_seen": int(np.max(s.n_samples_seen_))}


def _scaler_from_state(d: dict) -> StandardScaler:
    s = StandardScaler()
    s.mean_, s.scale_, s.var_ = (np.asarray(d[k], dtype=np.float64) for k in ("mean", "scale", "var"))
    s.n_features_in_ = len(s.mean_)
    s.n_samples_seen_ = d["n_samples_seen"]
    return s


class _NetworkRegressor(RegressorMixin, BaseEstimator):
    """Shared fitting logic: target scaling, Adam, shrinkage loss, checkpoint selection."""

    def save(self, path):
        """Write the fitted network, scalers and training history as a checkpoint."""
        check_is_fitted(self, "model_")
        h = self.history_
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        extra = {"estimator": type(self).__name__, "params": params,
                 "target_scaler": _scaler_state(self.target_scaler_),
                 "history": {"train_loss": h.train_loss, "val_loss": h.val_loss,
                             "epoch_seconds": h.epoch_seconds, "best_epoch": h.best_epoch},
                 **self._state()}
        return save_checkpoint(path, self.model_, extra)

    @classmethod
    def load(cls, path):
        model, extra = load_checkpoint(path)
        if extra.get("estimator") != cls.__name__:
            raise ValueError(f"{path} holds a {extra.get('estimator')}, not a {cls.__name__}")
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in extra["params"].items()}
        est = cls(**params)
        est.model_ = model
        est.target_scaler_ = _scaler_from_state(extra["target_scaler"])
        est.history_ = TrainHistory(**extra["history"])
        est._restore_state(extra)
        model.eval()
        return est

    def _adam(self):
        return AdamCfg(lr=self.lr)

    def _shrink(self):
        return ShrinkageCfg(self.shrink_a, self.shrink_c)

    def _fit_common(self, items, y, val_items, val_y):
        self.target_scaler_ = StandardScaler().fit(y)
        yz = self.target_scaler_.transform(y)
        self.model_ = self._build_model(items)
        val_batches = None
        if val_items is not None:
            vz = self.target_scaler_.transform(val_y)
            val_batches = [(self._collate(val_items, np.arange(s, min(s + EVAL_BATCH, len(vz)))),
                            vz[s:s + EVAL_BATCH]) for s in range(0, len(vz), EVAL_BATCH)]
        rng = np.random.default_rng([self.random_state, 1])
        self.history_ = fit_network(
            self.model_, lambda idx: self._collate(items, idx), yz, epochs=self.epochs,
            batch_size=self.batch_size, rng=rng, adam=self._adam(), shrink=self._shrink(),
            val_batches=val_batches, lr_schedule=self.lr_schedule,
            verbose=self.verbose)
        return self

    def _predict_items(self, items) -> np.ndarray:
        self.model_.eval()
        n = len(items)
        out = [self.model_.forward(self._collate(items, np.arange(s, min(s + EVAL_BATCH, n))))
               for s in range(0, n, EVAL_BATCH)]
        return self.target_scaler_.inverse_transform(np.concatenate(out))

    def validation_loss(self, X, y) -> float:
        """Mean shrinkage loss on standardised targets (the selection criterion)."""
        check_is_fitted(self, "model_")
        items = self._prepare(X)
        yz = self.target_scaler_.transform(check_targets(y, len(items)))
        return evaluate_loss(self.model_, [(self._collate(items, np.arange(len(items))), yz)],
                             self._shrink())


class SageRegressor(_NetworkRegressor):
    """Whole-graph regression of (VAT, ASAT) from registered mesh graphs.

    Node coordinates are standardised per axis with statistics of the
    training graphs; targets are standardised per column.
    """

    def __init__(self, hidden: int = 64, epochs: int = 150, batch_size: int = 16, lr: float = 1e-3,
                 shrink_a: float = 10.0, shrink_c: float = 0.2, bn_momentum: float = 0.1,
                 random_state: int = 0, lr_schedule: str = "constant",
                 verbose: bool = False):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.shrink_a = shrink_a
        self.shrink_c = shrink_c
        self.bn_momentum = bn_momentum
        self.random_state = random_state
        self.lr_schedule = lr_schedule
        self.verbose = verbose

    def _build_model(self, items):
        return GnnModel(in_dim=items[0].x.shape[1], hidden=self.hidden, seed=self.random_state,
                        bn_momentum=self.bn_momentum)

    def _prepare(self, X):
        graphs = check_graphs(X, getattr(self, "n_features_in_", None))
        s = self.coord_scaler_
        return [g.with_x(s.transform(g.x)) for g in graphs]

    @staticmethod
    def _collate(items, idx):
        return batch([items[i] for i in idx])

    def _state(self):
        return {"coord_scaler": _scaler_state(self.coord_scaler_)}

    def _restore_state(self, extra):
        self.coord_scaler_ = _scaler_from_state(extra["coord_scaler"])
        self.n_features_in_ = self.coord_scaler_.n_features_in_

    def fit(self, X, y=None, validation=None):
        """``y`` defaults to each graph's own target; ``validation`` is ``(graphs, y)``."""
        graphs = check_graphs(X)
        y = np.stack([g.y for g in graphs]) if y is None else check_targets(y, len(graphs))
        self.n_features_in_ = graphs[0].x.shape[1]
        self.coord_scaler_ = StandardScaler().fit(np.concatenate([g.x for g in graphs]))
        items = self._prepare(graphs)
        val_items = val_y = None
        if validation is not None:
            vg, vy = validation
            val_items = self._prepare(vg)
            val_y = np.stack([g.y for g in val_items]) if vy is None else check_targets(vy, len(val_items))
        return self._fit_common(items, y, val_items, val_y)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._predict_items(self._prepare(X))


class SilhouetteCnnRegressor(_NetworkRegressor):
    """Regression of (VAT, ASAT) from 2-channel (coronal, sagittal) silhouette images."""

    def __init__(self, channels=(16, 32, 64), hidden: int = 64, epochs: int = 20,
                 batch_size: int = 16, lr: float = 1e-3, shrink_a: float = 10.0,
                 shrink_c: float = 0.2, random_state: int = 0, lr_schedule: str = "constant",
                 verbose: bool = False):
        self.channels = channels
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.shrink_a = shrink_a
        self.shrink_c = shrink_c
        self.random_state = random_state
        self.lr_schedule = lr_schedule
        self.verbose = verbose

    def _build_model(self, items):
        return CnnModel(in_shape=items.shape[1:], channels=tuple(self.channels),
                        hidden=self.hidden, seed=self.random_state)

    def _prepare(self, X):
        return check_images(X, getattr(self, "image_shape_", None))

    @staticmethod
    def _collate(items, idx):
        return items[idx]

    def _state(self):
        return {"image_shape": list(self.image_shape_)}

    def _restore_state(self, extra):
        self.image_shape_ = tuple(extra["image_shape"])

    def fit(self, X, y, validation=None):
        images = check_images(X)
        y = check_targets(y, len(images))
        self.image_shape_ = images.shape[1:]
        val_items = val_y = None
        if validation is not None:
            val_items = self._prepare(validation[0])
            val_y = check_targets(validation[1], len(val_items))
        return self._fit_common(images, y, val_items, val_y)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._predict_items(self._prepare(X))
