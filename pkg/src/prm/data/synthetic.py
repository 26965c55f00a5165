"""Seeded synthetic recommendation logs with planted list-level structure.

Click probability of item ``i`` shown at rank ``pos(i)`` of a list ``S``::

    sigmoid(bias + w.x_i + u.x_i
            + interaction_scale * mean_{j in S, j != i} g[c_i, c_j]
            - position_scale * log(pos(i)))

``g`` is a sparse symmetric category-affinity matrix and ``u`` is the sum of
per-field preference vectors looked up by the user's gender, age bucket and
purchase level.  Setting ``interaction_scale = personalization_scale =
position_scale = 0`` gives the control arm in which sorting by ``w.x`` is
Bayes-optimal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .schema import DatasetManifest, ItemEntry, PretrainRecord, RerankRecord, UserProfile

__all__ = ["SynthSpec", "GroundTruth", "SyntheticData", "generate_synthetic",
           "click_logits", "pointwise_oracle_scores", "relabel"]

N_GENDER, N_AGE, N_PURCHASE = 2, 4, 3


@dataclass
class SynthSpec:
    n_requests: int = 1000
    n_pretrain: int = 5000
    n_users: int = 200
    n_items: int = 600
    n_categories: int = 6
    n_dense: int = 4
    n_candidates: int = 40
    n_max: int = 20
    history_len: int = 5
    interaction_scale: float = 3.0
    personalization_scale: float = 1.0
    position_scale: float = 0.0
    n_affinity_pairs: int = 3
    click_bias: float = -1.5
    category_skew: float = 0.5   # Dirichlet concentration for per-request category mix

    @property
    def d_feature(self) -> int:
        return self.n_categories + self.n_dense

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_categories", "n_candidates", "n_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("n_requests", "n_pretrain", "history_len", "n_dense", "n_affinity_pairs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.d_feature < 2:
            raise ValueError("d_feature (n_categories + n_dense) must be at least 2")
        if self.category_skew <= 0:
            raise ValueError("category_skew must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    w: np.ndarray                    # (d_feature,)
    affinity: np.ndarray             # (C, C) symmetric
    pref_gender: np.ndarray          # (N_GENDER, d_feature)
    pref_age: np.ndarray             # (N_AGE, d_feature)
    pref_purchase: np.ndarray        # (N_PURCHASE, d_feature)
    click_bias: float
    interaction_scale: float
    position_scale: float
    high_pairs: list = field(default_factory=list)

    def user_vector(self, user: UserProfile) -> np.ndarray:
        return (self.pref_gender[user.gender] + self.pref_age[user.age_bucket]
                + self.pref_purchase[user.purchase_level])

    def to_dict(self) -> dict:
        d = {}
        for k, v in asdict(self).items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        d["high_pairs"] = [list(p) for p in self.high_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        arr = {k: np.asarray(d[k], dtype=np.float64)
               for k in ("w", "affinity", "pref_gender", "pref_age", "pref_purchase")}
        return cls(**arr, click_bias=float(d["click_bias"]),
                   interaction_scale=float(d["interaction_scale"]),
                   position_scale=float(d["position_scale"]),
                   high_pairs=[tuple(p) for p in d.get("high_pairs", [])])


@dataclass
class SyntheticData:
    rerank: list
    pretrain: list
    candidates: list          # unordered candidate sets, RerankRecord with label 0
    truth: GroundTruth
    manifest: DatasetManifest


def click_logits(record: RerankRecord, truth: GroundTruth) -> np.ndarray:
    """True click logits for a list displayed in ``record.items`` order."""
    X = np.array([it.features for it in record.items])
    cats = np.array([it.category for it in record.items])
    n = len(cats)
    logit = truth.click_bias + X @ (truth.w + truth.user_vector(record.user))
    if n > 1 and truth.interaction_scale:
        G = truth.affinity[cats][:, cats]
        np.fill_diagonal(G, 0.0)
        logit = logit + truth.interaction_scale * G.sum(axis=1) / (n - 1)
    if truth.position_scale:
        logit = logit - truth.position_scale * np.log(np.arange(1, n + 1))
    return logit


def pointwise_oracle_scores(record: RerankRecord, truth: GroundTruth) -> np.ndarray:
    """Best context-free score: ignores the rest of the list and the display position."""
    X = np.array([it.features for it in record.items])
    return X @ (truth.w + truth.user_vector(record.user))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def relabel(records: Sequence[RerankRecord], truth: GroundTruth, seed: int) -> list[RerankRecord]:
    """Sample click labels for lists in their displayed order.

    Each request draws from its own stream keyed by ``(seed, index)`` so labels
    for one request do not depend on the lengths of the others.
    """
    out = []
    for idx, rec in enumerate(records):
        p = _sigmoid(click_logits(rec, truth))
        u = np.random.default_rng([seed, 7, idx]).random(len(p))
        items = tuple(ItemEntry(it.item_id, it.category, it.price_level, it.features, int(ui < pi))
                      for it, ui, pi in zip(rec.items, u, p))
        out.append(RerankRecord(rec.request_id, rec.user, rec.history, items))
    return out


def _ground_truth(spec: SynthSpec, rng: np.random.Generator) -> GroundTruth:
    d, C = spec.d_feature, spec.n_categories
    w = np.concatenate([rng.normal(0.0, 0.5, C), rng.normal(0.0, 1.0, spec.n_dense)])
    affinity = np.zeros((C, C))
    pairs = [(a, b) for a in range(C) for b in range(a + 1, C)]
    chosen = rng.permutation(len(pairs))[: min(spec.n_affinity_pairs, len(pairs))] if pairs else []
    high = sorted(pairs[k] for k in chosen)
    for a, b in high:
        affinity[a, b] = affinity[b, a] = 1.0
    s = spec.personalization_scale
    return GroundTruth(
        w=w, affinity=affinity,
        pref_gender=s * rng.normal(0.0, 1.0, (N_GENDER, d)),
        pref_age=s * rng.normal(0.0, 1.0, (N_AGE, d)),
        pref_purchase=s * rng.normal(0.0, 1.0, (N_PURCHASE, d)),
        click_bias=spec.click_bias, interaction_scale=spec.interaction_scale,
        position_scale=spec.position_scale, high_pairs=high,
    )


def generate_synthetic(spec: SynthSpec, seed: int = 0,
                       scorer: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> SyntheticData:
    """Build catalog, users, candidate sets, initial lists, labels and pretrain logs.

    Initial lists are the top ``n_max`` candidates by ``scorer(X)`` (a pointwise
    model over the feature matrix), or by the true ``w.x`` when no scorer is
    given; ties keep candidate order.  Every random component uses its own
    stream, so swapping the scorer changes only the ordering and its labels.
    """
    spec.validate()
    ss = np.random.SeedSequence(seed)
    r_truth, r_catalog, r_users, r_requests, r_pretrain = (np.random.default_rng(s) for s in ss.spawn(5))
    truth = _ground_truth(spec, r_truth)
    C = spec.n_categories

    cats = r_catalog.integers(0, C, spec.n_items)
    dense = r_catalog.normal(0.0, 1.0, (spec.n_items, spec.n_dense))
    prices = r_catalog.integers(1, 8, spec.n_items)
    feats = np.concatenate([np.eye(C)[cats], dense], axis=1)
    catalog = [ItemEntry(f"i{k:05d}", int(cats[k]), int(prices[k]), tuple(float(v) for v in feats[k]))
               for k in range(spec.n_items)]

    users, histories = [], []
    for k in range(spec.n_users):
        u = UserProfile(f"u{k:05d}", int(r_users.integers(N_GENDER)), int(r_users.integers(N_AGE)),
                        int(r_users.integers(N_PURCHASE)))
        taste = feats @ truth.user_vector(u)
        p = np.exp(taste - taste.max())
        p /= p.sum()
        hist = r_users.choice(spec.n_items, size=spec.history_len, replace=True, p=p) if spec.history_len else []
        users.append(u)
        histories.append(tuple(catalog[h].item_id for h in hist))

    by_cat = [np.flatnonzero(cats == c) for c in range(C)]
    cand_sets, lists = [], []
    for r in range(spec.n_requests):
        uk = int(r_requests.integers(spec.n_users))
        mix = r_requests.dirichlet(np.full(C, spec.category_skew))
        counts = r_requests.multinomial(spec.n_candidates, mix)
        idx = []
        for c in range(C):
            take = min(int(counts[c]), by_cat[c].size)
            if take:
                idx.extend(int(k) for k in r_requests.choice(by_cat[c], size=take, replace=False))
        if not idx:
            idx = [int(r_requests.integers(spec.n_items))]
        idx = [idx[k] for k in r_requests.permutation(len(idx))]
        cand = tuple(catalog[k] for k in idx)
        cand_rec = RerankRecord(f"r{r:06d}", users[uk], histories[uk], cand)
        cand_sets.append(cand_rec)
        Xc = feats[idx]
        score = scorer(Xc) if scorer is not None else Xc @ truth.w
        order = np.argsort(-np.asarray(score, dtype=np.float64).ravel(), kind="stable")[: spec.n_max]
        lists.append(RerankRecord(cand_rec.request_id, cand_rec.user, cand_rec.history,
                                  tuple(cand[k] for k in order)))
    rerank = relabel(lists, truth, seed)

    pretrain = []
    for k in range(spec.n_pretrain):
        uk = k if k < spec.n_users else int(r_pretrain.integers(spec.n_users))
        ik = int(r_pretrain.integers(spec.n_items))
        u = users[uk]
        p = _sigmoid(truth.click_bias + feats[ik] @ (truth.w + truth.user_vector(u)))
        label = int(r_pretrain.random() < p)
        it = catalog[ik]
        pretrain.append(PretrainRecord(u, histories[uk],
                                       ItemEntry(it.item_id, it.category, it.price_level, it.features, label)))

    manifest = DatasetManifest(
        d_feature=spec.d_feature, n_max=spec.n_max,
        vocab={"item_id": spec.n_items, "category": C, "price_level": 8,
               "gender": N_GENDER, "age_bucket": N_AGE, "purchase_level": N_PURCHASE},
        counts={"records": len(rerank), "items": sum(len(r.items) for r in rerank),
                "pretrain": len(pretrain)},
    )
    return SyntheticData(rerank, pretrain, cand_sets, truth, manifest)
