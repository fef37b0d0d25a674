"""Scikit-learn style front door for the recommender.

``PyramidMixerRecommender`` wraps the whole pipeline (ingest, filter,
split, train, rank) behind the familiar ``fit`` / ``predict`` /
``score`` surface so it composes with sklearn tooling such as
``clone`` and parameter search. The heavy lifting stays in the
dedicated modules; this one only validates inputs and glues.
"""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import data as D
from .data import Dataset, InteractionRecord, _pad_context, ingest, seen_items, split_leave_one_out
from .errors import ConfigError, DataError
from .evaluation import evaluate_ranking
from .model import ModelConfig
from .training import TrainSettings, train


def as_records(X, format: str = "canonical-tsv") -> list[InteractionRecord]:
    """Normalize estimator input into interaction records.

    Accepts a ready list of ``InteractionRecord``, an iterable of
    (user, item, timestamp) or (user, item, timestamp, side_fields)
    tuples, or a path to a log file in one of the known formats.
    """
    if isinstance(X, (str, os.PathLike)):
        return ingest(os.fspath(X), format=format)
    if X is None:
        raise DataError("no interaction data given")
    records = []
    for i, row in enumerate(X):
        if isinstance(row, InteractionRecord):
            records.append(row)
            continue
        try:
            user, item, ts = row[0], row[1], row[2]
            side = tuple(row[3]) if len(row) > 3 else ()
            records.append(InteractionRecord(str(user), str(item), int(ts), side))
        except (TypeError, IndexError, ValueError) as exc:
            raise DataError(f"row {i} is not an interaction record: {row!r}") from exc
    return records


def check_positive(name: str, value, minimum=1) -> None:
    if not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")


class PyramidMixerRecommender(BaseEstimator):
    """Next-item recommender built on stacked low-rank mixer layers.

    Parameters mirror ``ModelConfig`` and ``TrainSettings``; ``D_prime``
    and ``L_prime`` default to a quarter of their full widths when left
    as None. ``fit`` ingests an interaction log, applies the core
    filter, holds out each user's last two items, and trains with early
    stopping on validation MRR.
    """

    def __init__(self, L=50, D=64, D_prime=None, L_prime=None, S=3, K=3,
                 stride=2, padding=1, activation="gelu", low_rank=True,
                 cross_behavior_on=True, cross_feature_on=True, fusion_on=True,
                 pyramid_on=True, lr=1e-3, batch_size=256, patience=10,
                 max_epochs=200, weight_decay=0.0, min_count=5, eval_k=10,
                 format="canonical-tsv", seed=0, out_dir=None):
        self.L = L
        self.D = D
        self.D_prime = D_prime
        self.L_prime = L_prime
        self.S = S
        self.K = K
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.low_rank = low_rank
        self.cross_behavior_on = cross_behavior_on
        self.cross_feature_on = cross_feature_on
        self.fusion_on = fusion_on
        self.pyramid_on = pyramid_on
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.weight_decay = weight_decay
        self.min_count = min_count
        self.eval_k = eval_k
        self.format = format
        self.seed = seed
        self.out_dir = out_dir

    # ------------------------------------------------------------------
    def _model_config(self, dataset: Dataset) -> ModelConfig:
        n_fields = len(dataset.vocab.fields)
        d_prime = self.D_prime if self.D_prime is not None else max(1, self.D // 4)
        l_prime = self.L_prime if self.L_prime is not None else max(2, self.L // 4)
        config = ModelConfig(
            L=self.L, F=n_fields, D=self.D, D_prime=d_prime, L_prime=l_prime,
            S=self.S, K=self.K, stride=self.stride, padding=self.padding,
            activation=self.activation, low_rank=self.low_rank,
            cross_behavior_on=self.cross_behavior_on,
            cross_feature_on=self.cross_feature_on,
            fusion_on=self.fusion_on, pyramid_on=self.pyramid_on,
            field_names=dataset.vocab.fields, vocab_sizes=dataset.vocab.sizes())
        config.validate()
        return config

    def _settings(self) -> TrainSettings:
        settings = TrainSettings(
            lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, patience=self.patience,
            max_epochs=self.max_epochs, valid_k=self.eval_k)
        settings.validate()
        return settings

    def fit(self, X, y=None):
        """Train on an interaction log. ``y`` is ignored; targets come
        from each sequence itself."""
        check_positive("min_count", self.min_count, minimum=1)
        check_positive("eval_k", self.eval_k, minimum=1)
        records = as_records(X, format=self.format)
        dataset = split_leave_one_out(records, min_count=self.min_count)
        config = self._model_config(dataset)
        outcome = train(config, dataset, self._settings(), seed=self.seed,
                        out_dir=self.out_dir)
        self.dataset_ = dataset
        self.config_ = config
        self.net_ = outcome.best_net()
        self.history_ = outcome.history
        self.best_epoch_ = outcome.best_epoch
        self.n_users_ = len(dataset.split)
        self.n_items_ = dataset.vocab.size(dataset.vocab.fields[0])
        return self

    def _require_fit(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("call fit before using this estimator")

    def _user_indices(self, X) -> list[int]:
        order = {s.user_id: i for i, s in enumerate(self.dataset_.split.sequences)}
        if X is None:
            return list(range(len(order)))
        indices = []
        for user in X:
            if user not in order:
                raise DataError(f"unknown user id {user!r}")
            indices.append(order[user])
        return indices

    def predict(self, X=None, k=None, exclude_seen=True) -> np.ndarray:
        """Top-k next-item recommendations.

        ``X`` is a list of user ids (None means every fitted user);
        returns an (n, k) array of item id strings ranked best first.
        Ties favor the earlier vocabulary index, matching evaluation.
        """
        self._require_fit()
        k = self.eval_k if k is None else k
        check_positive("k", k, minimum=1)
        indices = self._user_indices(X)
        vocab = self.dataset_.vocab
        item_field = vocab.fields[0]
        out = []
        for idx in indices:
            seq = self.dataset_.split.sequences[idx]
            rows, mask = _pad_context(seq.fields, self.config_.L, self.config_.F)
            scores = self.net_.forward(rows[None], mask[None]).data[0].astype(np.float64)
            scores[D.PAD_INDEX] = -np.inf
            scores[D.UNK_INDEX] = -np.inf
            if exclude_seen:
                scores[np.unique(seq.fields[:, 0])] = -np.inf
            ranked = np.lexsort((np.arange(len(scores)), -scores))[:k]
            out.append([vocab.decode(item_field, int(j)) for j in ranked])
        return np.array(out, dtype=object)

    def evaluate(self, stage: str = "test", k: int = None):
        """Full-ranking quality report on a held-out stage."""
        self._require_fit()
        return evaluate_ranking(self.net_, self.dataset_.split, stage=stage,
                                k=self.eval_k if k is None else k,
                                batch_size=self.batch_size)

    def score(self, X=None, y=None) -> float:
        """Mean reciprocal rank at ``eval_k`` on the held-out test items
        (higher is better), for sklearn model selection."""
        return self.evaluate(stage="test").mrr
