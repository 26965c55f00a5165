"""Precision@k and MAP@k over ranked click lists.

MAP@k here divides each list's sum of ``Precision@i * click_i`` by the cutoff
``k``, not by the number of clicks; ``conventional_map_at_k`` gives the usual
average-precision form for outside comparison.  Values are accumulated as
exact fractions and rounded once, so the result does not depend on the
order of lists.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

__all__ = ["UndefinedMetricError", "RankingMetrics", "precision_at_k", "map_at_k",
           "conventional_map_at_k", "compute_metrics"]


class UndefinedMetricError(ValueError):
    pass


def _check(lists, k):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(lists) == 0:
        raise UndefinedMetricError("metric is undefined on an empty request set")


def _clicks(labels, k):
    return [1 if v else 0 for v in list(labels)[:k]]


def _list_precision(labels, k) -> Fraction:
    return Fraction(sum(_clicks(labels, k)), k)


def _list_ap(labels, k) -> Fraction:
    hits, total = 0, Fraction(0)
    for i, c in enumerate(_clicks(labels, k), start=1):
        if c:
            hits += 1
            total += Fraction(hits, i)
    return total / k


def precision_at_k(ranked_labels: Sequence[Sequence[int]], k: int) -> float:
    """Mean over lists of the clicked fraction of the top ``k`` (missing slots count as unclicked)."""
    _check(ranked_labels, k)
    return float(sum(_list_precision(l, k) for l in ranked_labels) / len(ranked_labels))


def map_at_k(ranked_labels: Sequence[Sequence[int]], k: int) -> float:
    _check(ranked_labels, k)
    return float(sum(_list_ap(l, k) for l in ranked_labels) / len(ranked_labels))


def conventional_map_at_k(ranked_labels: Sequence[Sequence[int]], k: int) -> float:
    """Average precision normalized by the clicks inside the cutoff (0 for click-free lists)."""
    _check(ranked_labels, k)
    total = Fraction(0)
    for labels in ranked_labels:
        n = sum(_clicks(labels, k))
        if n:
            total += _list_ap(labels, k) * k / n
    return float(total / len(ranked_labels))


@dataclass
class RankingMetrics:
    precision_at: dict = field(default_factory=dict)
    map_at: dict = field(default_factory=dict)
    num_requests: int = 0

    def to_report(self) -> dict:
        return {"precision": {str(k): v for k, v in sorted(self.precision_at.items())},
                "map": {str(k): v for k, v in sorted(self.map_at.items())},
                "num_requests": self.num_requests}

    @property
    def map(self) -> float:
        return self.map_at[max(self.map_at)]


def compute_metrics(ranked_labels, precision_ks=(5, 10), map_ks=(5, 10, 30)) -> RankingMetrics:
    return RankingMetrics(
        precision_at={k: precision_at_k(ranked_labels, k) for k in precision_ks},
        map_at={k: map_at_k(ranked_labels, k) for k in map_ks},
        num_requests=len(ranked_labels),
    )
