"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .data.schema import PretrainRecord, RerankRecord

__all__ = ["VocabularyError", "check_rerank_records", "check_pretrain_records", "check_pv_table",
           "check_feature_matrix"]


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def check_rerank_records(records: Sequence, d_feature: Optional[int] = None,
                         n_max: Optional[int] = None) -> list[RerankRecord]:
    records = list(records)
    for rec in records:
        if not isinstance(rec, RerankRecord):
            raise TypeError(f"expected RerankRecord, got {type(rec).__name__}")
        if not rec.items:
            raise ValueError(f"request {rec.request_id!r} has an empty item list")
        if n_max is not None and len(rec.items) > n_max:
            raise ValueError(f"request {rec.request_id!r} has {len(rec.items)} items, n_max={n_max}")
        if d_feature is not None:
            for it in rec.items:
                if len(it.features) != d_feature:
                    raise ValueError(f"request {rec.request_id!r}, item {it.item_id!r}: "
                                     f"{len(it.features)} features, expected {d_feature}")
    return records


def check_pretrain_records(records: Sequence, d_feature: Optional[int] = None) -> list[PretrainRecord]:
    records = list(records)
    for rec in records:
        if not isinstance(rec, PretrainRecord):
            raise TypeError(f"expected PretrainRecord, got {type(rec).__name__}")
        if d_feature is not None and len(rec.item.features) != d_feature:
            raise ValueError(f"item {rec.item.item_id!r}: {len(rec.item.features)} features, "
                             f"expected {d_feature}")
    return records


def check_pv_table(pv_table: Optional[Mapping], records: Sequence[RerankRecord], d_pv: int) -> None:
    if pv_table is None:
        raise ValueError("this model uses personalized vectors; pass pv_table")
    for rec in records:
        for it in rec.items:
            v = pv_table.get((rec.request_id, it.item_id))
            if v is None:
                raise KeyError(f"no personalized vector for request {rec.request_id!r}, item {it.item_id!r}")
            if len(v) != d_pv:
                raise ValueError(f"personalized vector of length {len(v)}, expected {d_pv}")


def check_feature_matrix(X, n_features: Optional[int] = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains NaN or infinity")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, but the model was fitted with {n_features}")
    return X
