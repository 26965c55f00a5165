"""Turn expert-graded query lists into click-style re-ranking records.

Graded lists are read with a minimal SVMlight-style text adapter::

    <rating> qid:<query> <index>:<value> <index>:<value> ...  # optional comment

Lines sharing a ``qid`` form one list, in file order; that order is taken as
the initial ranking.  Missing feature indices are zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .schema import ItemEntry, ParseError, RerankRecord, UserProfile

__all__ = ["GradedItem", "GradedList", "read_graded", "view_probability", "convert_letor"]

DEFAULT_THRESHOLD = 1.5
DEFAULT_ETA = 0.2


@dataclass(frozen=True)
class GradedItem:
    item_id: str
    features: tuple[float, ...]
    rating: float


@dataclass(frozen=True)
class GradedList:
    query_id: str
    items: tuple[GradedItem, ...]


def read_graded(path, d_feature: Optional[int] = None) -> list[GradedList]:
    rows: list[tuple[str, float, dict]] = []
    max_index = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            body = raw.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            try:
                rating = float(tokens[0])
            except ValueError:
                raise ParseError(f"bad rating {tokens[0]!r}", lineno, "rating") from None
            if len(tokens) < 2 or not tokens[1].startswith("qid:"):
                raise ParseError("expected qid:<id> after rating", lineno, "qid")
            qid = tokens[1][4:]
            feats = {}
            for tok in tokens[2:]:
                idx, _, val = tok.partition(":")
                try:
                    i, v = int(idx), float(val)
                except ValueError:
                    raise ParseError(f"bad feature token {tok!r}", lineno, "features") from None
                if i < 1:
                    raise ParseError("feature indices start at 1", lineno, "features")
                feats[i] = v
                max_index = max(max_index, i)
            rows.append((qid, rating, feats))
    width = d_feature if d_feature is not None else max_index
    lists: dict[str, list[GradedItem]] = {}
    for qid, rating, feats in rows:
        vec = [0.0] * width
        for i, v in feats.items():
            if i > width:
                raise ParseError(f"feature index {i} exceeds d_feature={width}", None, "features")
            vec[i - 1] = v
        bucket = lists.setdefault(qid, [])
        bucket.append(GradedItem(f"{qid}:{len(bucket)}", tuple(vec), rating))
    return [GradedList(q, tuple(items)) for q, items in lists.items()]


def view_probability(pos, eta: float):
    """Chance that the item at 1-based rank ``pos`` is seen: ``pos ** -eta``."""
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    return np.power(np.asarray(pos, dtype=np.float64), -float(eta))


def convert_letor(lists: Iterable[GradedList], threshold: float = DEFAULT_THRESHOLD,
                  eta: float = DEFAULT_ETA, seed: int = 0,
                  n_max: Optional[int] = None) -> list[RerankRecord]:
    """Binary click labels: relevant (rating above ``threshold``) and viewed.

    Unviewed items stay in the list with label 0.
    """
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if not 0.0 <= threshold <= 4.0:
        raise ValueError(f"threshold must lie in [0, 4], got {threshold}")
    rng = np.random.default_rng(seed)
    out = []
    for gl in lists:
        items = gl.items[:n_max] if n_max else gl.items
        if not items:
            continue
        viewed = rng.random(len(items)) < view_probability(np.arange(1, len(items) + 1), eta)
        entries = tuple(
            ItemEntry(it.item_id, 0, 1, it.features, int(bool(v) and it.rating > threshold))
            for it, v in zip(items, viewed)
        )
        out.append(RerankRecord(gl.query_id, UserProfile(gl.query_id), (), entries))
    return out
