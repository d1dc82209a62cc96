"""scikit-learn compatible wrappers around preprocessing and the network.

Rows of ``X`` are windows (``n_windows, window_len``) so the pieces drop
into a ``sklearn.pipeline.Pipeline``::

    pipe = make_pipeline(GridUpsampler(4000, 16000), SuperResolver(epochs=30))
    pipe.fit(low_rate_windows, clean_windows)
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dsp
from ._validation import check_paired, check_rate_ratio, check_windows
from .datasets import make_pretrain_pair
from .metrics import lsd
from .model import HybridUNet, ModelConfig
from .training import (TrainConfig, enhance, fit_windows, load_checkpoint, run_windows,
                       save_checkpoint, seed_everything)


class AccelPreprocessor(TransformerMixin, BaseEstimator):
    """(n_samples, 3) accelerometer array -> zero-mean axis average, shape (n_samples,)."""

    def __init__(self, sample_rate_hz=16000):
        self.sample_rate_hz = sample_rate_hz

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ValueError(f"expected (n_samples, 3) accelerometer data, got {X.shape}")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ValueError(f"expected (n_samples, 3) accelerometer data, got {X.shape}")
        tri = dsp.TriAxialSignal(X[:, 0], X[:, 1], X[:, 2], self.sample_rate_hz)
        return dsp.preprocess_accel(tri).samples


class MovementHighpass(TransformerMixin, BaseEstimator):
    """Row-wise 10 Hz first-order highpass."""

    def __init__(self, sample_rate_hz=16000):
        self.sample_rate_hz = sample_rate_hz

    def fit(self, X, y=None):
        self.n_features_in_ = check_windows(X).shape[1]
        return self

    def transform(self, X):
        X = check_windows(X)
        return np.stack([
            dsp.movement_highpass(dsp.AudioSignal(row, self.sample_rate_hz)).samples for row in X
        ])


class GridUpsampler(TransformerMixin, BaseEstimator):
    """Lift low-rate windows onto the target grid (spline or zero-order hold)."""

    def __init__(self, low_rate_hz=4000, target_rate_hz=16000, method="spline"):
        self.low_rate_hz = low_rate_hz
        self.target_rate_hz = target_rate_hz
        self.method = method

    def fit(self, X, y=None):
        check_rate_ratio(self.target_rate_hz, self.low_rate_hz)
        self.n_features_in_ = check_windows(X).shape[1]
        return self

    def transform(self, X):
        X = check_windows(X)
        return np.stack([
            dsp.upsample_to_grid(dsp.AudioSignal(row, self.low_rate_hz),
                                 self.target_rate_hz, self.method).samples
            for row in X
        ])


class LowRateSimulator(TransformerMixin, BaseEstimator):
    """Turn clean target windows into pretraining inputs (downsample, then lift back)."""

    def __init__(self, sample_rate_hz=16000, low_rate_hz=4000, scheme="decimate", method="spline"):
        self.sample_rate_hz = sample_rate_hz
        self.low_rate_hz = low_rate_hz
        self.scheme = scheme
        self.method = method

    def fit(self, X, y=None):
        check_rate_ratio(self.sample_rate_hz, self.low_rate_hz)
        self.n_features_in_ = check_windows(X).shape[1]
        return self

    def transform(self, X):
        X = check_windows(X)
        return np.stack([
            make_pretrain_pair(dsp.AudioSignal(row, self.sample_rate_hz), self.low_rate_hz,
                               self.scheme, self.method)[0].samples
            for row in X
        ])


class SuperResolver(RegressorMixin, BaseEstimator):
    """Speech super-resolution network as a regressor from input windows to clean windows.

    Parameters
    ----------
    model_config : ModelConfig or dict, optional
        Architecture; defaults to the full-size network.
    epochs, batch_size, learning_rate, seed, dtype, max_wall_minutes
        Training controls, see :class:`vibra_sr.training.TrainConfig`.
    warm_start : bool
        Continue training the existing ``model_`` on the next ``fit`` call
        (the fine-tuning workflow).
    """

    def __init__(self, model_config=None, epochs=30, batch_size=16, learning_rate=3e-4,
                 seed=0, dtype="float32", max_wall_minutes=None, warm_start=False):
        self.model_config = model_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.dtype = dtype
        self.max_wall_minutes = max_wall_minutes
        self.warm_start = warm_start

    def _resolved_config(self) -> ModelConfig:
        cfg = self.model_config
        if cfg is None:
            return ModelConfig()
        if isinstance(cfg, dict):
            return ModelConfig.from_dict(cfg)
        return cfg

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed,
                           phase="finetune" if self._warm() else "pretrain",
                           max_wall_minutes=self.max_wall_minutes, dtype=self.dtype)

    def _warm(self):
        return self.warm_start and hasattr(self, "model_")

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self._resolved_config()
        X, Y = check_paired(X, y, cfg.min_length)
        if X_val is not None:
            X_val, y_val = check_paired(X_val, y_val, cfg.min_length)
        tcfg = self._train_config()
        if not self._warm():
            seed_everything(self.seed)
            self.model_ = HybridUNet(cfg)
        state = fit_windows(self.model_, X, Y, tcfg, X_val, y_val)
        self.history_ = state.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_windows(X, self.model_.cfg.min_length)
        return run_windows(self.model_, X, self.batch_size)

    def score(self, X, y, sample_weight=None):
        """Negative mean log-spectral distance (higher is better)."""
        pred = self.predict(X)
        Y = check_windows(y)
        d = np.array([lsd(t, p) for t, p in zip(Y, pred)])
        return -float(np.average(d, weights=sample_weight))

    def enhance(self, sig: dsp.AudioSignal, target_rate_hz=16000) -> dsp.AudioSignal:
        check_is_fitted(self, "model_")
        return enhance(self.model_, sig, target_rate_hz)

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, seed=self.seed, train_cfg=self._train_config())

    @classmethod
    def from_checkpoint(cls, path, **params):
        model, meta = load_checkpoint(path)
        est = cls(model_config=model.cfg, seed=meta["seed"], **params)
        est.model_ = model
        return est

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags
