"""scikit-learn style wrappers around the training loops.

Sequences are padded index matrices ``(n, seq_len)`` with 0 as the mask;
``real_length`` is read off the padding.

>>> enc = BarlowTwinsEncoder(epochs=1).fit(X_train)            # doctest: +SKIP
>>> clf = SequenceClassifier(encoder=enc).fit(X_lab, y_lab)   # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from . import tensor as T
from .augment import AugmentationSpec
from .exceptions import ConfigError
from .models import ModelConfig, classify, context_tower, encode_numpy, init_parameters
from .training import (
    TrainConfig,
    finetune_classifier,
    finetune_next_item,
    pretrain_bt,
    pretrain_dual_encoder,
    target_ranks,
)
from .validation import check_sequences, check_targets, real_lengths


def _n_items(n_items, *arrays) -> int:
    seen = max(int(np.max(a)) for a in arrays)
    if n_items is None:
        return seen
    if seen > n_items:
        raise ConfigError(f"index {seen} exceeds n_items={n_items}")
    return int(n_items)


class BarlowTwinsEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised sequence encoder; ``transform`` gives representations."""

    def __init__(
        self,
        n_items=None,
        augmentation="segment_mask",
        p=0.2,
        lambd=10.0,
        batch_size=128,
        epochs=10,
        learning_rate=1e-3,
        random_state=0,
    ):
        self.n_items = n_items
        self.augmentation = augmentation
        self.p = p
        self.lambd = lambd
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequences(X, self.n_items)
        seed = int(self.random_state or 0)
        config = TrainConfig(
            phase="bt_pretrain",
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lambd=self.lambd,
            augmentation=AugmentationSpec(self.augmentation, self.p, seed),
            seed=seed,
        )
        model = ModelConfig(n_items=_n_items(self.n_items, X), seq_len=X.shape[1])
        self.bundle_, self.history_ = pretrain_bt(X, real_lengths(X), config, model)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        X = check_sequences(X, self.bundle_.config.n_items, self.n_features_in_)
        return encode_numpy(X, self.bundle_)


def _start_bundle(encoder, X, n_items, seed):
    """Encoder weights to start from: a fitted estimator, or fresh ones."""
    if encoder is None:
        cfg = ModelConfig(n_items=n_items, seq_len=X.shape[1])
        return init_parameters(cfg, seed, ("embedding", "encoder"))
    check_is_fitted(encoder, "bundle_")
    if encoder.bundle_.config.seq_len != X.shape[1]:
        raise ConfigError("sequence length differs from the encoder's")
    if n_items > encoder.bundle_.config.n_items:
        raise ConfigError("item indices exceed the encoder's vocabulary")
    return encoder.bundle_


class SequenceClassifier(ClassifierMixin, BaseEstimator):
    """MLP head over a (pretrained or fresh) sequence encoder.

    ``eval_set=(X_val, y_val)`` in :meth:`fit` records validation accuracy
    per epoch in ``history_``.
    """

    def __init__(
        self,
        encoder=None,
        encoder_mode="fixed",
        batch_size=64,
        epochs=50,
        learning_rate=1e-3,
        random_state=0,
    ):
        self.encoder = encoder
        self.encoder_mode = encoder_mode
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        fitted = getattr(self.encoder, "bundle_", None)
        n_items = fitted.config.n_items if fitted is not None else None
        X = check_sequences(X, n_items)
        y = column_or_1d(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ConfigError(f"{len(y)} labels for {len(X)} sequences")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if eval_set is not None:
            X_va = check_sequences(eval_set[0], n_items, X.shape[1])
            y_va = self._encode_labels(eval_set[1])
        else:
            X_va, y_va = X[:0], y_idx[:0]
        seed = int(self.random_state or 0)
        start = _start_bundle(self.encoder, X, _n_items(n_items, X, *([X_va] if len(X_va) else [])), seed)
        config = TrainConfig(
            phase="finetune_classify",
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            encoder_mode=self.encoder_mode,
            seed=seed,
        )
        self.bundle_, self.history_ = finetune_classifier(
            start, (X, y_idx), (X_va, y_va), len(self.classes_), config
        )
        self.n_features_in_ = X.shape[1]
        return self

    def _encode_labels(self, y):
        # labels unseen in training get an index no logit column has: always a miss
        y = column_or_1d(y)
        pos = np.clip(np.searchsorted(self.classes_, y), 0, len(self.classes_) - 1)
        return np.where(self.classes_[pos] == y, pos, len(self.classes_)).astype(np.int64)

    def decision_function(self, X):
        check_is_fitted(self, "bundle_")
        X = check_sequences(X, self.bundle_.config.n_items, self.n_features_in_)
        return classify(T.Tensor(encode_numpy(X, self.bundle_)), self.bundle_).data

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class NextItemRecommender(BaseEstimator):
    """Two-tower next-item model; ``predict`` returns the top-``k`` item indices.

    With ``encoder=None`` the whole dual encoder is trained from scratch;
    otherwise it starts from the fitted encoder and honours ``encoder_mode``.
    """

    def __init__(
        self,
        encoder=None,
        encoder_mode="trainable",
        n_items=None,
        k=10,
        batch_size=128,
        epochs=10,
        learning_rate=1e-3,
        random_state=0,
    ):
        self.encoder = encoder
        self.encoder_mode = encoder_mode
        self.n_items = n_items
        self.k = k
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = check_sequences(X, self.n_items)
        y = check_targets(y, len(X), self.n_items)
        seed = int(self.random_state or 0)
        if self.encoder is None:
            model = ModelConfig(n_items=_n_items(self.n_items, X, y), seq_len=X.shape[1])
            config = TrainConfig(
                phase="de_pretrain",
                batch_size=self.batch_size,
                epochs=self.epochs,
                learning_rate=self.learning_rate,
                seed=seed,
            )
            self.bundle_, self.history_ = pretrain_dual_encoder(X, y, config, model)
        else:
            start = _start_bundle(self.encoder, X, _n_items(self.n_items, X, y), seed)
            config = TrainConfig(
                phase="finetune_next_item",
                batch_size=self.batch_size,
                epochs=self.epochs,
                learning_rate=self.learning_rate,
                encoder_mode=self.encoder_mode,
                seed=seed,
            )
            self.bundle_, self.history_ = finetune_next_item(start, X, y, config)
        self.n_features_in_ = X.shape[1]
        return self

    def _context(self, X):
        check_is_fitted(self, "bundle_")
        X = check_sequences(X, self.bundle_.config.n_items, self.n_features_in_)
        return context_tower(T.Tensor(encode_numpy(X, self.bundle_)), self.bundle_).data

    def predict(self, X):
        """Top-``k`` item indices per row by cosine similarity, best first."""
        ctx = self._context(X)
        table = self.bundle_.embedding.data[1:]
        eps = T.NORM_EPS
        ctx = ctx / (np.linalg.norm(ctx, axis=1, keepdims=True) + eps)
        table = table / (np.linalg.norm(table, axis=1, keepdims=True) + eps)
        scores = ctx @ table.T
        # stable sort on negated scores keeps lower indices first on ties
        return np.argsort(-scores, axis=1, kind="stable")[:, : self.k] + 1

    def score(self, X, y):
        """Top-``k`` recall (hit ratio)."""
        ctx = self._context(X)
        y = check_targets(y, len(ctx), self.bundle_.config.n_items)
        return float(np.mean(target_ranks(ctx, y, self.bundle_.embedding.data) < self.k))

