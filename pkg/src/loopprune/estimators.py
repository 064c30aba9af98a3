"""Scikit-learn compatible wrappers around the core pipeline.

``UclfFilter`` is the restoration network as a transformer (degraded
patches in, filtered patches out), ``UclfPruner`` is a meta-estimator
that compresses a fitted filter, and ``BlockDctDegrader`` applies the
codec-artifact proxy, so all three compose with sklearn pipelines and
``clone``/``get_params`` tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import codec, metrics, model as model_mod, pruning
from .autodiff import Rng
from .errors import ConfigError
from .validation import as_image_batch, as_paired_patches, as_patch_array


class UclfFilter(BaseEstimator, TransformerMixin):
    """Trainable in-loop restoration filter.

    ``fit(X, y)`` trains the network to map degraded patches ``X`` onto
    originals ``y`` with MAE loss and Adam; ``transform(X)`` applies the
    filter.  Patches are single-channel, uint8 or floats in [0, 1].
    """

    def __init__(self, width_scale=1.0, epochs=30, lr=1e-3, batch_size=8, seed=0):
        self.width_scale = width_scale
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = as_paired_patches(X, y)
        self.model_ = model_mod.build_default_uclf(self.width_scale, seed=self.seed,
                                                   patch_size=X.shape[2])
        self.history_ = []
        rng = Rng(self.seed).split()
        pruning.fine_tune(self.model_, X, y, self.epochs, lr=self.lr,
                          batch_size=self.batch_size, rng=rng,
                          on_epoch=lambda e, loss: self.history_.append((e, loss)))
        return self

    def transform(self, X):
        self._check_fitted()
        return model_mod.apply_model(self.model_, as_patch_array(X))

    def score(self, X, y):
        """Mean per-patch PSNR (dB, peak 1.0) of the filtered output."""
        X, y = as_paired_patches(X, y)
        preds = self.transform(X)
        return float(np.mean([metrics.psnr(preds[i], y[i], peak=1.0)
                              for i in range(len(y))]))

    def save(self, path):
        self._check_fitted()
        model_mod.save_model(self.model_, path)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "UclfFilter":
        est = cls(**params)
        est.model_ = model_mod.load_model(path)
        est.history_ = []
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this UclfFilter is not fitted; call fit or from_checkpoint")


class UclfPruner(BaseEstimator, TransformerMixin):
    """Meta-estimator that structurally compresses a fitted UclfFilter.

    ``fit(X, y, X_val=, y_val=)`` runs the pruning loop against the given
    training and validation pairs (validation defaults to the training
    pairs) and exposes the compressed filter as ``estimator_`` together
    with the per-attempt ``trace_``.
    """

    def __init__(self, estimator=None, st=0.8, ct=0.001, at=None, max_drop=0.1,
                 pt=0.9, train_epochs=40, lr=3e-3, batch_size=4, seed=0):
        self.estimator = estimator
        self.st = st
        self.ct = ct
        self.at = at
        self.max_drop = max_drop
        self.pt = pt
        self.train_epochs = train_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self) -> pruning.PruneConfig:
        return pruning.PruneConfig(st=self.st, ct=self.ct, at=self.at,
                                   max_drop=self.max_drop, pt=self.pt,
                                   train_epochs=self.train_epochs, lr=self.lr,
                                   batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y, X_val=None, y_val=None):
        if self.estimator is None or not hasattr(self.estimator, "model_"):
            raise ConfigError("UclfPruner requires a fitted UclfFilter as `estimator`")
        X, y = as_paired_patches(X, y)
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val, y_val = as_paired_patches(X_val, y_val)
        pruned, trace = pruning.prune_loop(self.estimator.model_, self._config(),
                                           (X, y), (X_val, y_val))
        est = UclfFilter(**self.estimator.get_params())
        est.model_ = pruned
        est.history_ = []
        self.estimator_ = est
        self.trace_ = trace
        return self

    def transform(self, X):
        if not hasattr(self, "estimator_"):
            raise NotFittedError("this UclfPruner is not fitted")
        return self.estimator_.transform(X)


class BlockDctDegrader(BaseEstimator, TransformerMixin):
    """Stateless codec-artifact transformer: block-DCT quantization at a
    QP-like level.  Accepts (h, w) or (n, h, w) 8-bit images."""

    def __init__(self, qp=32):
        self.qp = qp

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        images = as_image_batch(X)
        q = codec.QuantSpec(self.qp)
        out = np.stack([codec.degrade(img, q) for img in images])
        return out[0] if np.asarray(X).ndim == 2 else out
