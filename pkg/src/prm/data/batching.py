from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .schema import RerankRecord

__all__ = ["Batch", "make_batch", "batch_iter"]


@dataclass
class Batch:
    """Padded block of lists.  Arrays are indexed ``[list, position, ...]``."""

    request_ids: list
    X: np.ndarray            # (B, L, d_feature)
    labels: np.ndarray       # (B, L)
    mask: np.ndarray         # (B, L) True for real items
    PV: Optional[np.ndarray] = None  # (B, L, d_pv)

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def width(self) -> int:
        return self.X.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def make_batch(records: Sequence[RerankRecord], pv_table: Optional[Mapping] = None,
               width: Optional[int] = None, d_pv: Optional[int] = None) -> Batch:
    """Pad ``records`` to ``width`` (default: longest list in the batch).

    ``pv_table`` maps ``(request_id, item_id)`` to a personalized vector.
    """
    if not records:
        raise ValueError("cannot batch an empty record list")
    L = width or max(len(r.items) for r in records)
    d = len(records[0].items[0].features)
    B = len(records)
    X = np.zeros((B, L, d))
    labels = np.zeros((B, L))
    mask = np.zeros((B, L), dtype=bool)
    PV = None
    if pv_table is not None:
        if d_pv is None:
            d_pv = len(next(iter(pv_table.values())))
        PV = np.zeros((B, L, d_pv))
    for b, rec in enumerate(records):
        n = len(rec.items)
        if n > L:
            raise ValueError(f"record {rec.request_id!r} has {n} items, batch width is {L}")
        X[b, :n] = [it.features for it in rec.items]
        labels[b, :n] = [it.label for it in rec.items]
        mask[b, :n] = True
        if PV is not None:
            for i, it in enumerate(rec.items):
                key = (rec.request_id, it.item_id)
                if key not in pv_table:
                    raise KeyError(f"no personalized vector for request {key[0]!r}, item {key[1]!r}")
                PV[b, i] = pv_table[key]
    return Batch([r.request_id for r in records], X, labels, mask, PV)


def batch_iter(records: Sequence[RerankRecord], batch_size: int, shuffle_seed: Optional[int] = None,
               pv_table: Optional[Mapping] = None, width: Optional[int] = None) -> Iterator[Batch]:
    """Yield padded batches; the order is a seeded permutation when ``shuffle_seed`` is set."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        yield make_batch(chunk, pv_table, width)
