"""Click model over (user, history, item) whose last hidden layer gives the personalized vectors.

The user side is the mean of the history's item-id embeddings concatenated
with gender, age-bucket and purchase-level embeddings.  It is joined with the
item's raw features and passed through a ReLU stack; the final hidden
activation is the personalized vector and a sigmoid on top of it predicts the
click.
"""
from __future__ import annotations

import json
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data.schema import ItemEntry, PretrainRecord, RerankRecord, UserProfile
from .training import TrainConfig, train_loop
from .validation import VocabularyError, check_pretrain_records, check_rerank_records

__all__ = [
    "PersonalizationPretrainer", "init_pretrain_params", "user_representation", "pretrain_forward",
    "pretrain_loss", "pointwise_cross_entropy", "extract_pv_table", "write_pv_table", "read_pv_table",
]

P_CLAMP = 1e-12
USER_FIELDS = ("gender", "age_bucket", "purchase_level")


def init_pretrain_params(n_items: int, field_sizes: Mapping[str, int], d_feature: int,
                         d_emb: int = 16, hidden: Sequence[int] = (64, 32), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p = {"emb.item": rng.normal(0.0, 0.1, (n_items, d_emb))}
    for f in USER_FIELDS:
        p[f"emb.{f}"] = rng.normal(0.0, 0.1, (field_sizes[f], d_emb))
    width = 4 * d_emb + d_feature
    for k, h in enumerate(hidden):
        lim = np.sqrt(6.0 / (width + h))
        p[f"hidden{k}.w"] = rng.uniform(-lim, lim, (width, h))
        p[f"hidden{k}.b"] = np.zeros((1, h))
        width = h
    lim = np.sqrt(6.0 / (width + 1))
    p["logit.w"] = rng.uniform(-lim, lim, (width, 1))
    p["logit.b"] = np.zeros((1, 1))
    return p


def _n_hidden(params) -> int:
    return sum(1 for k in params if k.startswith("hidden") and k.endswith(".w"))


def _lookup(index: Mapping[str, int], item_id: str) -> int:
    try:
        return index[item_id]
    except KeyError:
        raise VocabularyError(f"item id {item_id!r} is not in the pre-training vocabulary") from None


def _check_field(params, user: UserProfile):
    for f in USER_FIELDS:
        v = getattr(user, f)
        size = params[f"emb.{f}"].shape[0]
        if not 0 <= v < size:
            raise VocabularyError(f"{f}={v} outside vocabulary of size {size}")


def user_representation(user: UserProfile, history: Sequence[str], params: Mapping,
                        item_index: Mapping[str, int]) -> np.ndarray:
    """Mean history embedding (zeros for an empty history) followed by the three profile embeddings."""
    _check_field(params, user)
    table = np.asarray(params["emb.item"])
    if history:
        hist = table[[_lookup(item_index, h) for h in history]].mean(axis=0)
    else:
        hist = np.zeros(table.shape[1])
    parts = [hist] + [np.asarray(params[f"emb.{f}"])[getattr(user, f)] for f in USER_FIELDS]
    return np.concatenate(parts)


def pretrain_forward(user_rep: np.ndarray, item: ItemEntry, params: Mapping, training: bool = False,
                     dropout: float = 0.0, key=None):
    """Return ``(p_click, pv)`` for one (user, item) pair."""
    h = ad.constant(np.concatenate([np.asarray(user_rep), np.asarray(item.features)]).reshape(1, -1))
    pv = _hidden_stack(h, {k: ad.constant(v) for k, v in params.items()}, training, dropout, key)
    p = ad.sigmoid(ad.matmul(pv, ad.constant(params["logit.w"])) + ad.constant(params["logit.b"]))
    return float(p.value[0, 0]), pv.value[0].copy()


def _hidden_stack(h, nodes, training, dropout, key):
    for k in range(_n_hidden(nodes)):
        h = ad.relu(ad.matmul(h, nodes[f"hidden{k}.w"]) + nodes[f"hidden{k}.b"])
        if dropout:
            h = ad.dropout(h, dropout, training, None if key is None else (*key, k))
    return h


def _batch_graph(nodes, triples, item_index, training=False, dropout=0.0, key=None):
    """Batched forward over ``(user, history, item)`` triples; returns ``(p, pv)`` nodes."""
    B = len(triples)
    d_emb = nodes["emb.item"].shape[1]
    flat, pool_rows, pool_cols, pool_vals = [], [], [], []
    for b, (user, history, _) in enumerate(triples):
        _check_field(nodes, user)
        for h in history:
            pool_rows.append(b)
            pool_cols.append(len(flat))
            pool_vals.append(1.0 / len(history))
            flat.append(_lookup(item_index, h))
    if flat:
        pool = np.zeros((B, len(flat)))
        pool[pool_rows, pool_cols] = pool_vals
        hist = ad.matmul(ad.constant(pool), ad.gather_rows(nodes["emb.item"], flat))
    else:
        hist = ad.constant(np.zeros((B, d_emb)))
    parts = [hist]
    for f in USER_FIELDS:
        parts.append(ad.gather_rows(nodes[f"emb.{f}"], [getattr(u, f) for u, _, _ in triples]))
    X = ad.constant(np.array([it.features for _, _, it in triples], dtype=np.float64))
    pv = _hidden_stack(ad.concat_cols(parts + [X]), nodes, training, dropout, key)
    p = ad.sigmoid(ad.matmul(pv, nodes["logit.w"]) + nodes["logit.b"])
    return p, pv


def pointwise_cross_entropy(p: ad.Node, labels) -> ad.Node:
    """``-sum(y log p + (1 - y) log(1 - p))`` with ``p`` clamped to ``[1e-12, 1 - 1e-12]``."""
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    log_p = ad.log(p, P_CLAMP)
    log_q = ad.log(ad.add(ad.scale(p, -1.0), ad.constant(np.ones(p.shape))), P_CLAMP)
    total = ad.add(ad.mul(log_p, ad.constant(y)), ad.mul(log_q, ad.constant(1.0 - y)))
    return ad.scale(ad.sum_all(total), -1.0)


def pretrain_loss(p_click, labels) -> float:
    """Plain-float version of :func:`pointwise_cross_entropy` for scored batches."""
    p = np.clip(np.asarray(p_click, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _triples_of(records):
    out = []
    for rec in records:
        if isinstance(rec, PretrainRecord):
            out.append((rec.user, rec.history, rec.item))
        else:
            out.extend((rec.user, rec.history, it) for it in rec.items)
    return out


def extract_pv_table(records: Sequence[RerankRecord], params: Mapping, item_index: Mapping[str, int],
                     batch_size: int = 1024) -> dict:
    """Personalized vector for every ``(request_id, item_id)`` pair, computed in eval mode."""
    nodes = {k: ad.constant(v) for k, v in params.items()}
    table = {}
    keys, triples = [], []
    for rec in records:
        for it in rec.items:
            keys.append((rec.request_id, it.item_id))
            triples.append((rec.user, rec.history, it))
    for lo in range(0, len(triples), batch_size):
        _, pv = _batch_graph(nodes, triples[lo:lo + batch_size], item_index)
        for key, row in zip(keys[lo:lo + batch_size], pv.value):
            table[key] = row.copy()
    return table


def write_pv_table(table: Mapping, path) -> None:
    with open(path, "w") as fh:
        for (rid, iid), pv in table.items():
            fh.write(json.dumps({"item_id": iid, "pv": [float(x) for x in pv], "request_id": rid},
                                sort_keys=True) + "\n")


def read_pv_table(path) -> dict:
    table = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                table[(d["request_id"], d["item_id"])] = np.asarray(d["pv"], dtype=np.float64)
    return table


class PersonalizationPretrainer(BaseEstimator):
    """Point-wise click model trained with cross entropy; ``transform`` yields personalized vectors.

    Parameters
    ----------
    d_emb : int, default=16
        Width of every embedding table.
    hidden : tuple of int, default=(64, 32)
        ReLU layer widths; the last one is the personalized-vector width.
    learning_rate : float, default=1e-3
        Constant Adam step size.
    batch_size, max_steps, max_epochs, seed
        Optimization budget and seed.
    dropout : float, default=0.0
        Dropout after each hidden layer during training.
    field_sizes : dict, optional
        Vocabulary sizes of the user fields; inferred from the data when omitted.
    """

    def __init__(self, d_emb=16, hidden=(64, 32), learning_rate=1e-3, batch_size=512,
                 max_steps=2000, max_epochs=None, seed=0, dropout=0.0, field_sizes=None):
        self.d_emb = d_emb
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.max_epochs = max_epochs
        self.seed = seed
        self.dropout = dropout
        self.field_sizes = field_sizes

    @property
    def d_pv(self) -> int:
        return int(tuple(self.hidden)[-1])

    def fit(self, records, y=None):
        records = check_pretrain_records(records)
        if not records:
            raise ValueError("cannot pre-train on an empty record set")
        ids = set()
        for r in records:
            ids.update(r.history)
            ids.add(r.item.item_id)
        self.item_index_ = {iid: k for k, iid in enumerate(sorted(ids))}
        sizes = dict(self.field_sizes or {})
        for f in USER_FIELDS:
            seen = max(getattr(r.user, f) for r in records) + 1
            sizes[f] = max(sizes.get(f, 0), seen)
        self.field_sizes_ = sizes
        self.n_features_in_ = len(records[0].item.features)
        check_pretrain_records(records, self.n_features_in_)
        params = init_pretrain_params(len(self.item_index_), sizes, self.n_features_in_,
                                      self.d_emb, tuple(self.hidden), self.seed)
        triples = _triples_of(records)
        labels = np.array([it.label for _, _, it in triples], dtype=np.float64)
        cfg = TrainConfig(batch_size=self.batch_size, max_steps=self.max_steps, max_epochs=self.max_epochs,
                          schedule="constant", learning_rate=self.learning_rate, beta2=0.999,
                          eps=1e-8, seed=self.seed)

        def batches(epoch):
            order = np.random.default_rng([self.seed, epoch]).permutation(len(triples))
            for lo in range(0, len(order), cfg.batch_size):
                yield order[lo:lo + cfg.batch_size]

        def loss_fn(nodes, idx, step):
            p, _ = _batch_graph(nodes, [triples[i] for i in idx], self.item_index_, training=True,
                                dropout=self.dropout, key=(self.seed, step))
            return pointwise_cross_entropy(p, labels[idx])

        self.params_, self.log_ = train_loop(params, loss_fn, batches, cfg)
        return self

    def predict_proba(self, records) -> np.ndarray:
        """Click probability for each pre-train record (or each item of each rerank record)."""
        check_is_fitted(self, "params_")
        triples = _triples_of(records)
        nodes = {k: ad.constant(v) for k, v in self.params_.items()}
        out = []
        for lo in range(0, len(triples), 1024):
            p, _ = _batch_graph(nodes, triples[lo:lo + 1024], self.item_index_)
            out.append(p.value.ravel())
        return np.concatenate(out) if out else np.zeros(0)

    def loss(self, records) -> float:
        p = self.predict_proba(records)
        return pretrain_loss(p, [it.label for _, _, it in _triples_of(records)])

    def transform(self, records) -> dict:
        check_is_fitted(self, "params_")
        records = check_rerank_records(records, self.n_features_in_)
        return extract_pv_table(records, self.params_, self.item_index_)

    def to_dict(self) -> dict:
        check_is_fitted(self, "params_")
        return {
            "format_version": 1,
            "estimator": self.get_params(),
            "item_ids": sorted(self.item_index_, key=self.item_index_.get),
            "field_sizes": self.field_sizes_,
            "n_features_in": self.n_features_in_,
            "tensors": {k: {"rows": int(v.shape[0]), "cols": int(v.shape[1]),
                            "data": [float(x) for x in v.ravel()]} for k, v in self.params_.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PersonalizationPretrainer":
        est = cls(**{k: (tuple(v) if k == "hidden" else v) for k, v in doc["estimator"].items()})
        est.item_index_ = {iid: k for k, iid in enumerate(doc["item_ids"])}
        est.field_sizes_ = doc["field_sizes"]
        est.n_features_in_ = doc["n_features_in"]
        est.params_ = {k: np.asarray(t["data"], dtype=np.float64).reshape(t["rows"], t["cols"])
                       for k, t in doc["tensors"].items()}
        est.log_ = []
        return est
