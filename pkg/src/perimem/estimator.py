"""scikit-learn estimator wrappers around the two architectures.

X everywhere is a list of Sample objects (histories carry their own labels),
so y is optional: pass it to override the embedded labels, or leave it None.
Both classes follow the BaseEstimator contract (constructor only stores
parameters; fitted state lives in trailing-underscore attributes), so
get_params / set_params / clone work as usual.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .baseline import SumPoolModel
from .model import ModelConfig, ResponseModel
from .trainer import TrainConfig, fit_model
from .validation import check_samples, feature_counts, infer_vocab_sizes


def _with_labels(samples, y):
    if y is None:
        return samples
    labels = np.asarray(y)
    if labels.shape != (len(samples),):
        raise ValueError(f"y has shape {labels.shape}, expected ({len(samples)},)")
    return [dataclasses.replace(s, label=int(v)) for s, v in zip(samples, labels)]


class _ResponseClassifier(BaseEstimator, ClassifierMixin):
    """Shared fit/predict plumbing; subclasses pick the model architecture."""

    def _build_model(self, config, vocab_sizes):
        raise NotImplementedError

    def _model_config(self, samples) -> ModelConfig:
        raise NotImplementedError

    def fit(self, X, y=None, validation=None):
        samples = _with_labels(check_samples(X), y)
        held_out = check_samples(validation) if validation is not None else None
        self.model_ = self._build_model(samples, held_out)
        train_config = TrainConfig(
            learning_rate=self.learning_rate,
            cov_weight=self.cov_weight,
            l2_weight=self.l2_weight,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )
        self.fit_result_ = fit_model(
            self.model_, samples, train_config, test_samples=held_out
        )
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = self.model_.predict_proba_samples(check_samples(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def _sizes(self, samples, held_out):
        pool = samples if held_out is None else samples + held_out
        sizes = self.vocab_sizes
        if sizes is None:
            sizes = infer_vocab_sizes(pool)
        return sizes, feature_counts(pool)


class PeriodicMemoryClassifier(_ResponseClassifier):
    """Layered periodic-memory model behind a fit/predict interface."""

    def __init__(
        self,
        periods=(1, 2, 4),
        slot_dim=32,
        embed_dim=16,
        energy_hidden=64,
        mlp_hidden=(200, 80),
        gate_bias_spans=None,
        learning_rate=1e-3,
        cov_weight=1e-4,
        l2_weight=1e-5,
        batch_size=128,
        epochs=5,
        seed=0,
        vocab_sizes=None,
    ):
        self.periods = periods
        self.slot_dim = slot_dim
        self.embed_dim = embed_dim
        self.energy_hidden = energy_hidden
        self.mlp_hidden = mlp_hidden
        self.gate_bias_spans = gate_bias_spans
        self.learning_rate = learning_rate
        self.cov_weight = cov_weight
        self.l2_weight = l2_weight
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.vocab_sizes = vocab_sizes

    def _build_model(self, samples, held_out):
        sizes, counts = self._sizes(samples, held_out)
        spans = self.gate_bias_spans
        config = ModelConfig(
            vocab_sizes=sizes,
            periods=tuple(self.periods),
            slot_dim=self.slot_dim,
            embed_dim=self.embed_dim,
            energy_hidden=self.energy_hidden,
            mlp_hidden=tuple(self.mlp_hidden),
            gate_bias_spans=None if spans is None else tuple(spans),
            seed=self.seed,
            **counts,
        )
        return ResponseModel.init(config)

    def attention_weights(self, X):
        """Per-sample attention over memory layers, shape (n_samples, depth)."""
        check_is_fitted(self, "model_")
        return self.model_.attention_weights_samples(check_samples(X))


class SumPoolingClassifier(_ResponseClassifier):
    """Sum-pooled history baseline behind the same interface."""

    def __init__(
        self,
        embed_dim=16,
        mlp_hidden=(200, 80),
        learning_rate=1e-3,
        l2_weight=1e-5,
        batch_size=128,
        epochs=5,
        seed=0,
        vocab_sizes=None,
    ):
        self.embed_dim = embed_dim
        self.mlp_hidden = mlp_hidden
        self.learning_rate = learning_rate
        self.l2_weight = l2_weight
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.vocab_sizes = vocab_sizes

    # The baseline has no memory matrix for the decorrelation term to act on.
    cov_weight = 0.0

    def _build_model(self, samples, held_out):
        sizes, counts = self._sizes(samples, held_out)
        config = ModelConfig(
            vocab_sizes=sizes,
            embed_dim=self.embed_dim,
            mlp_hidden=tuple(self.mlp_hidden),
            seed=self.seed,
            **counts,
        )
        return SumPoolModel.init(config)
