"""Run-level evaluation reports and attention aggregation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .data.schema import DatasetManifest, RerankRecord
from .metrics import RankingMetrics, compute_metrics
from .model import ConfigurationError, rank_order

__all__ = ["IdentityReranker", "LabelOracleReranker", "evaluate_run", "AttentionAggregate",
           "export_attention", "ranked_labels"]


class IdentityReranker:
    """Keeps the initial order (scores decrease with position)."""

    def predict_scores(self, records, pv_table=None):
        return [-np.arange(len(r.items), dtype=np.float64) for r in records]


class LabelOracleReranker:
    """Sorts clicked items first; upper bound for any re-ranker on the same labels."""

    def predict_scores(self, records, pv_table=None):
        return [np.array([it.label for it in r.items], dtype=np.float64) for r in records]


def ranked_labels(records: Sequence[RerankRecord], scores: Sequence[np.ndarray]) -> list[list[int]]:
    return [[rec.items[k].label for k in rank_order(s)] for rec, s in zip(records, scores)]


def _check_manifest(reranker, manifest: Optional[DatasetManifest]):
    config = getattr(reranker, "config_", None)
    if manifest is None or config is None:
        return
    if manifest.d_feature != config.d_feature:
        raise ConfigurationError(f"checkpoint expects d_feature={config.d_feature}, "
                                 f"dataset has {manifest.d_feature}")
    if manifest.n_max > config.n_max:
        raise ConfigurationError(f"dataset n_max={manifest.n_max} exceeds checkpoint n_max={config.n_max}")


def evaluate_run(reranker, records: Sequence[RerankRecord], pv_table: Optional[Mapping] = None,
                 ks: Optional[Sequence[int]] = None, manifest: Optional[DatasetManifest] = None):
    """Score every request and compute Precision@k / MAP@k of the re-ranked lists.

    ``reranker`` is anything with ``predict_scores(records, pv_table)``.
    Returns ``(metrics, dump)`` where ``dump`` holds one entry per request.
    """
    _check_manifest(reranker, manifest)
    records = list(records)
    scores = reranker.predict_scores(records, pv_table)
    if ks is None:
        n_max = manifest.n_max if manifest is not None else getattr(getattr(reranker, "config_", None),
                                                                      "n_max", 30)
        ks = (5, 10, n_max)
    ks = sorted(set(int(k) for k in ks))
    ranked = ranked_labels(records, scores)
    metrics = compute_metrics(ranked, precision_ks=[k for k in ks if k <= 10] or ks, map_ks=ks)
    dump = []
    for rec, s, labels in zip(records, scores, ranked):
        order = rank_order(s)
        dump.append({"request_id": rec.request_id,
                     "order": [rec.items[k].item_id for k in order],
                     "scores": [float(s[k]) for k in order],
                     "labels": labels})
    return metrics, dump


@dataclass
class AttentionAggregate:
    grouping: str
    labels: list
    matrix: np.ndarray     # mean weight, NaN where the cell is empty
    counts: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query\\key"] + [str(l) for l in self.labels])
        for lab, row, cnt in zip(self.labels, self.matrix, self.counts):
            w.writerow([str(lab)] + ["empty" if c == 0 else f"{v:.6f}" for v, c in zip(row, cnt)])
        return buf.getvalue()


def _group_ids(rec: RerankRecord, grouping: str) -> np.ndarray:
    if grouping == "category":
        return np.array([it.category for it in rec.items])
    if grouping == "price_level":
        return np.array([it.price_level for it in rec.items])
    if grouping == "position":
        return np.arange(len(rec.items))
    raise ValueError(f"unknown grouping {grouping!r}")


def export_attention(reranker, records: Sequence[RerankRecord], grouping: str = "category",
                     block: int = -1, head="mean", pv_table: Optional[Mapping] = None,
                     n_groups: Optional[int] = None, labels: Optional[Sequence] = None) -> AttentionAggregate:
    """Mean attention from items of group g (query) to items of group g' (key).

    ``head`` is an index or ``"mean"`` (average over heads).  For
    ``grouping="position"`` the groups are list positions 1..n_max.
    """
    records = list(records)
    weights = reranker.attention_weights(records, pv_table)
    if n_groups is None:
        if grouping == "position":
            n_groups = reranker.config_.n_max
        else:
            n_groups = 1 + max(int(_group_ids(r, grouping).max()) for r in records)
    if labels is None:
        labels = list(range(1, n_groups + 1)) if grouping == "position" else list(range(n_groups))
    total = np.zeros((n_groups, n_groups))
    counts = np.zeros((n_groups, n_groups), dtype=np.int64)
    for rec, w in zip(records, weights):
        a = w[block].mean(axis=0) if head == "mean" else w[block][int(head)]
        g = _group_ids(rec, grouping)
        np.add.at(total, (g[:, None], g[None, :]), a)
        np.add.at(counts, (g[:, None], g[None, :]), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    return AttentionAggregate(grouping, list(labels), matrix, counts)
