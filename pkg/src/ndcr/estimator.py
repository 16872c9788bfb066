"""scikit-learn style wrapper around the training loop.

Samples are :class:`~ndcr.datagen.Instance` objects rather than rows of a
feature matrix, since each retrieval problem carries its own text length.
Targets are gold candidate indices.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .datagen import Instance
from .errors import DimensionError
from .layers import EVAL
from .model import ModelConfig, collate, final_scores, forward
from .optim import OptimizerConfig
from .tensor import no_grad
from .trainer import TrainConfig, evaluate, predicted_counts, train


def check_instances(X, y=None, d=None, L=None):
    """Validate a sequence of instances and optional gold indices.

    Returns ``(instances, y)`` with ``y`` as an int array (or None). Raises
    ``TypeError`` for non-instances, ``DimensionError`` for inconsistent
    widths or candidate counts and ``ValueError`` for bad targets.
    """
    if isinstance(X, Instance):
        raise TypeError("expected a sequence of Instance objects, got a single Instance")
    X = list(X)
    if not X:
        raise ValueError("no instances given")
    for i, inst in enumerate(X):
        if not isinstance(inst, Instance):
            raise TypeError(f"sample {i} is {type(inst).__name__}, not Instance")
    d = X[0].d if d is None else d
    L = X[0].L if L is None else L
    for i, inst in enumerate(X):
        if inst.d != d or inst.L != L:
            raise DimensionError(f"sample {i} has d={inst.d}, L={inst.L}; expected d={d}, L={L}")
        for name in ("text", "images", "cross"):
            if not np.isfinite(getattr(inst, name)).all():
                raise ValueError(f"sample {i} has non-finite {name}")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(X)},)")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("y must hold integer candidate indices")
        if (y < 0).any() or (y >= L).any():
            raise ValueError(f"y must lie in [0, {L})")
        y = y.astype(np.int64)
    return X, y


class NDCRRanker(BaseEstimator, ClassifierMixin):
    """Reranks the candidate images of each instance; predicts the gold index.

    Parameters mirror the optimizer and model configuration. ``validation``
    is the fraction of training instances held out for checkpoint selection
    when ``fit`` gets no explicit validation set.
    """

    def __init__(self, ablation="full", lr=6e-5, batch_size=36, epochs=30, dropout=0.1, seed=10,
                 heads=4, fusion_scale=1000.0, uniformity_margin=0.3, negation_margin=0.2, init_seed=10,
                 validation=0.2, use_gold_counts=False):
        self.ablation = ablation
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.dropout = dropout
        self.seed = seed
        self.heads = heads
        self.fusion_scale = fusion_scale
        self.uniformity_margin = uniformity_margin
        self.negation_margin = negation_margin
        self.init_seed = init_seed
        self.validation = validation
        self.use_gold_counts = use_gold_counts

    def _train_config(self, d: int) -> TrainConfig:
        return TrainConfig(
            optim=OptimizerConfig(lr=self.lr, batch_size=self.batch_size, dropout=self.dropout,
                                  epochs=self.epochs, seed=self.seed),
            model=ModelConfig(d=d, heads=self.heads, fusion_scale=self.fusion_scale,
                              uniformity_margin=self.uniformity_margin, negation_margin=self.negation_margin,
                              ablation=self.ablation, init_seed=self.init_seed),
        )

    def fit(self, X, y=None, X_val=None, y_val=None):
        X, y = check_instances(X, y)
        if y is not None:
            X = [dataclasses.replace(inst, gold=int(g)) for inst, g in zip(X, y)]
        if X_val is None:
            if not 0.0 < self.validation < 1.0:
                raise ValueError("validation must lie in (0, 1) when no validation set is given")
            n_val = max(1, int(round(len(X) * self.validation)))
            if n_val >= len(X):
                raise ValueError("too few instances to hold out a validation split")
            X, X_val = X[:-n_val], X[-n_val:]
        else:
            X_val, y_val = check_instances(X_val, y_val, d=X[0].d, L=X[0].L)
            if y_val is not None:
                X_val = [dataclasses.replace(inst, gold=int(g)) for inst, g in zip(X_val, y_val)]
        cfg = self._train_config(X[0].d)
        result = train(X, X_val, cfg)
        self.store_ = result.store
        self.config_ = cfg
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X[0].d
        self.n_candidates_ = X[0].L
        self.classes_ = np.arange(X[0].L)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Final-stage scores, shape (n_instances, L); higher means more likely gold."""
        check_is_fitted(self, "store_")
        X, _ = check_instances(X, d=self.n_features_in_, L=self.n_candidates_)
        out = []
        for i in range(0, len(X), self.config_.eval_batch):
            batch = collate(X[i:i + self.config_.eval_batch], self.store_.dtype)
            counts = batch.count if self.use_gold_counts else predicted_counts(self.store_, batch)
            with no_grad():
                bundle = forward(self.store_, batch, self.config_.model, EVAL, counts=counts)
            out.append(final_scores(bundle, self.ablation))
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=-1)

    def predict_count(self, X) -> np.ndarray:
        """Predicted number of propositions per instance."""
        check_is_fitted(self, "store_")
        X, _ = check_instances(X, d=self.n_features_in_, L=self.n_candidates_)
        return np.concatenate([
            predicted_counts(self.store_, collate(X[i:i + 250], self.store_.dtype)) for i in range(0, len(X), 250)
        ])

    def report(self, X):
        """Full evaluation report (per-count buckets, ablations, count confusion)."""
        check_is_fitted(self, "store_")
        X, _ = check_instances(X, d=self.n_features_in_, L=self.n_candidates_)
        return evaluate(X, self.store_, self.config_.model, use_gold_counts=self.use_gold_counts)

    def score(self, X, y=None, sample_weight=None):
        """Mean retrieval accuracy; ``y`` defaults to each instance's stored gold index."""
        X, y = check_instances(X, y)
        if y is None:
            y = np.array([inst.gold for inst in X])
        return super().score(X, y, sample_weight=sample_weight)
