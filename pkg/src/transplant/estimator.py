"""scikit-learn style wrapper around a single adapter transplant."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import graph as G
from .tensor import make_rng
from .train import TrainConfig, task_of, train_adapter


def _images(X, shape, dtype) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False, ensure_min_samples=1)
    if X.ndim == len(shape):            # (N, H, W) for single-channel inputs
        X = X[:, None]
    if tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"images must be shaped (N, {', '.join(map(str, shape))}); got {X.shape}")
    return X


class AdapterTransplanter(BaseEstimator):
    """Graft ``teacher``'s category module onto ``task_module`` and train the adapter.

    ``fit(None)`` (or an empty ``X``) runs the zero-sample back-distill path,
    which touches no data. ``task_module`` defaults to the teacher's own, which
    is plain adapter insertion.
    """

    def __init__(self, teacher=None, task_module=None, strategy="back-distill", depth=1, kernel=1,
                 adapter_init="he", lam=None, alpha_mode="fixed-1", steps=2000, lr=1e-2, batch_size=16,
                 seeds_per_step=8, random_state=0):
        self.teacher = teacher
        self.task_module = task_module
        self.strategy = strategy
        self.depth = depth
        self.kernel = kernel
        self.adapter_init = adapter_init
        self.lam = lam
        self.alpha_mode = alpha_mode
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seeds_per_step = seeds_per_step
        self.random_state = random_state

    def _config(self, n: int) -> TrainConfig:
        return TrainConfig(strategy=self.strategy, samples=n, lam=self.lam, alpha_mode=self.alpha_mode,
                           steps=self.steps, lr=self.lr, batch_size=self.batch_size,
                           seeds_per_step=self.seeds_per_step, seed=self.random_state)

    def fit(self, X=None, y=None):
        if not isinstance(self.teacher, G.TeacherNet):
            raise TypeError("teacher must be a TeacherNet")
        task_module = self.task_module if self.task_module is not None else self.teacher.task
        self.task_ = task_of(task_module)
        in_shape = self.teacher.category.input_shape
        dtype = self.teacher.category.dtype
        data = None
        if X is not None and len(X) > 0:
            if y is None:
                raise ValueError("labels are required when images are given")
            X = _images(X, in_shape, dtype)
            y = np.asarray(y)
            if len(y) != len(X):
                raise ValueError(f"{len(X)} images but {len(y)} labels")
            if self.task_ == "seg":
                y = _images(y, task_module.output_shape, dtype)
            else:
                y = y.astype(np.int64)
            data = (X, y)
        cfg = self._config(0 if data is None else len(data[0]))
        net = G.TransplantNet()
        g = task_module.copy()
        net.add_task(g)
        cid = self.teacher.category.id
        G.graft(net, self.teacher, g.id, cid, adapter_init=self.adapter_init, depth=self.depth,
                rng=make_rng(10_000 + int(self.random_state)), kernel=self.kernel)
        self.adapter_, self.log_ = train_adapter(net, self.teacher, (cid, g.id), data, cfg)
        self.net_, self.pair_ = net, (cid, g.id)
        self.n_samples_seen_ = cfg.samples
        return self

    def _outputs(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        path = G.compose_path(self.net_, *self.pair_)
        X = _images(X, path.modules[0].input_shape, path.modules[0].dtype)
        return path.predict(X).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        out = self._outputs(X)
        if self.task_ == "seg":
            return out
        z = np.exp(out - out.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Class indices for classification, 0/1 masks for segmentation."""
        p = self.predict_proba(X)
        if self.task_ == "seg":
            return (p >= 0.5).astype(np.int64)
        return p.argmax(axis=1)

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy (classification) or pixel accuracy (segmentation), as a fraction."""
        pred = self.predict(X)
        y = np.asarray(y)
        if self.task_ == "seg":
            y = y.reshape(pred.shape)
            hits = (pred == (y >= 0.5)).reshape(len(pred), -1).mean(axis=1)
        else:
            hits = (pred == y).astype(np.float64)
        return float(np.average(hits, weights=sample_weight))

    def frozen_audit(self) -> Optional[bool]:
        check_is_fitted(self, "log_")
        return self.log_.audit_ok
