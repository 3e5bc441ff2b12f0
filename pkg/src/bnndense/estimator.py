"""scikit-learn style wrapper: ``fit`` on image/mask arrays, ``predict`` label maps."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import SyntheticSample
from .exceptions import DataError, ShapeError
from .metrics import ConfusionMatrix
from .network import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, train


def check_images(X) -> np.ndarray:
    """``(N, C, H, W)`` finite float32 batch."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped (N, C, H, W), got {X.shape}")
    return X


def check_masks(y, X=None) -> np.ndarray:
    """Integer ``(N, H, W)`` label maps, optionally matched against an image batch."""
    y = check_array(y, allow_nd=True, dtype=None, ensure_all_finite=True)
    if y.ndim != 3:
        raise ShapeError(f"expected masks shaped (N, H, W), got {y.shape}")
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise DataError("mask labels must be integers")
    y = y.astype(np.int64)
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]):
        raise ShapeError(f"masks {y.shape} do not match images {X.shape}")
    return y


class BinarySegmenter(ClassifierMixin, BaseEstimator):
    """Binary encoder-decoder segmenter trained in two stages.

    Hyperparameters mirror ``ModelConfig`` and ``TrainConfig`` fields.  The
    validation split is taken from the tail of the training arrays when
    ``validation_fraction > 0``.
    """

    def __init__(self, K=4, widths=(16, 32, 64, 128), attention=True, binarize_encoder=True,
                 binarize_decoder=True, tau=0.0, epochs_float=10, epochs_binary=10, batch_size=16,
                 lr=1e-3, lr_binary=1e-3, flip=True, crop=True, validation_fraction=0.0, seed=0):
        self.K = K
        self.widths = widths
        self.attention = attention
        self.binarize_encoder = binarize_encoder
        self.binarize_decoder = binarize_decoder
        self.tau = tau
        self.epochs_float = epochs_float
        self.epochs_binary = epochs_binary
        self.batch_size = batch_size
        self.lr = lr
        self.lr_binary = lr_binary
        self.flip = flip
        self.crop = crop
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _configs(self, X, n_classes):
        _, c, h, w = X.shape
        mc = ModelConfig(height=h, width=w, in_channels=c, classes=n_classes, K=self.K,
                         widths=tuple(self.widths), attention=self.attention,
                         binarize_encoder=self.binarize_encoder, binarize_decoder=self.binarize_decoder,
                         tau=self.tau, seed=self.seed)
        tc = TrainConfig(epochs_float=self.epochs_float, epochs_binary=self.epochs_binary,
                         batch_size=self.batch_size, lr=self.lr, lr_binary=self.lr_binary, flip=self.flip,
                         crop=self.crop, seed=self.seed, data_seed=self.seed, n_train=len(X), n_val=0)
        return mc, tc

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        if y.min() < 0:
            raise DataError("mask labels must be non-negative")
        self.classes_ = np.arange(max(2, int(y.max()) + 1))
        n_val = int(round(len(X) * self.validation_fraction))
        split = len(X) - n_val
        if split < 1:
            raise ValueError("validation_fraction leaves no training samples")
        samples = [SyntheticSample(X[i], y[i]) for i in range(len(X))]
        mc, tc = self._configs(X, len(self.classes_))
        tc = dataclasses.replace(tc, n_train=split, n_val=n_val)
        result = train(tc, mc, samples[:split], samples[split:])
        self.model_ = result.model
        self.history_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities ``(N, classes, H, W)``."""
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_images(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y, sample_weight=None) -> float:
        """Mean IoU of the predicted label maps (``sample_weight`` is not supported)."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        X = check_images(X)
        y = check_masks(y, X)
        return ConfusionMatrix(len(self.classes_)).update(y, self.predict(X)).miou()

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BinarySegmenter":
        model = load_checkpoint(data)
        c = model.cfg
        est = cls(K=c.K, widths=c.widths, attention=c.attention, binarize_encoder=c.binarize_encoder,
                  binarize_decoder=c.binarize_decoder, tau=c.tau, seed=c.seed)
        est.model_ = model
        est.classes_ = np.arange(c.classes)
        est.n_features_in_ = c.in_channels
        est.history_ = []
        return est
