"""Point-wise feed-forward ranker used to produce the initial lists.

It sees only the item feature vector, never the user or the other items of
the list.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data.schema import RerankRecord
from .pretrain import pointwise_cross_entropy
from .training import TrainConfig, train_loop
from .validation import check_feature_matrix

__all__ = ["PointwiseRanker", "baseline_forward", "init_baseline_params", "build_initial_lists"]

log = logging.getLogger(__name__)


def init_baseline_params(d_feature: int, hidden: Sequence[int] = (64, 32), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p, width = {}, d_feature
    for k, h in enumerate(list(hidden) + [1]):
        lim = np.sqrt(6.0 / (width + h))
        p[f"layer{k}.w"] = rng.uniform(-lim, lim, (width, h))
        p[f"layer{k}.b"] = np.zeros((1, h))
        width = h
    return p


def baseline_forward(nodes: dict, X: ad.Node) -> ad.Node:
    """Logit column for the rows of ``X``; ReLU between layers, linear output."""
    n_layers = sum(1 for k in nodes if k.endswith(".w"))
    h = X
    for k in range(n_layers):
        h = ad.matmul(h, nodes[f"layer{k}.w"]) + nodes[f"layer{k}.b"]
        if k < n_layers - 1:
            h = ad.relu(h)
    return h


class PointwiseRanker(BaseEstimator):
    """DNN learning-to-rank scorer trained with point-wise cross entropy on click labels.

    Parameters
    ----------
    hidden : tuple of int, default=(64, 32)
    learning_rate : float, default=1e-3
    batch_size : int, default=256
    max_steps : int, default=2000
    max_epochs : int or None, default=None
    seed : int, default=0
    """

    def __init__(self, hidden=(64, 32), learning_rate=1e-3, batch_size=256, max_steps=2000,
                 max_epochs=None, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.max_epochs = max_epochs
        self.seed = seed

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("labels must be 0 or 1")
        self.n_features_in_ = X.shape[1]
        params = init_baseline_params(X.shape[1], tuple(self.hidden), self.seed)
        cfg = TrainConfig(batch_size=self.batch_size, max_steps=self.max_steps, max_epochs=self.max_epochs,
                          schedule="constant", learning_rate=self.learning_rate, beta2=0.999, eps=1e-8,
                          seed=self.seed)

        def batches(epoch):
            order = np.random.default_rng([self.seed, epoch]).permutation(X.shape[0])
            for lo in range(0, len(order), cfg.batch_size):
                yield order[lo:lo + cfg.batch_size]

        def loss_fn(nodes, idx, step):
            p = ad.sigmoid(baseline_forward(nodes, ad.constant(X[idx])))
            return pointwise_cross_entropy(p, y[idx])

        self.params_, self.log_ = train_loop(params, loss_fn, batches, cfg)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_feature_matrix(X, self.n_features_in_)
        nodes = {k: ad.constant(v) for k, v in self.params_.items()}
        return baseline_forward(nodes, ad.constant(X)).value.ravel()

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        p = 1.0 / (1.0 + np.exp(-z))
        return np.column_stack([1.0 - p, p])

    def build_initial_lists(self, candidates: Sequence[RerankRecord], n_max: int) -> list[RerankRecord]:
        return build_initial_lists(candidates, self, n_max)


def build_initial_lists(candidates: Sequence[RerankRecord], ranker: PointwiseRanker, n_max: int):
    """Top ``n_max`` candidates of every request by descending score; ties keep candidate order.

    Requests with no candidates are skipped and counted in the log.
    """
    out, skipped = [], 0
    for rec in candidates:
        if not rec.items:
            skipped += 1
            continue
        scores = ranker.decision_function(np.array([it.features for it in rec.items]))
        order = np.argsort(-scores, kind="stable")[:n_max]
        out.append(RerankRecord(rec.request_id, rec.user, rec.history, tuple(rec.items[k] for k in order)))
    if skipped:
        log.warning("skipped %d requests with empty candidate sets", skipped)
    return out
