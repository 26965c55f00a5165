"""Seeded synthetic experiments shared by the acceptance suite.

Each preset plants one kind of list-level structure in the click model,
trains the pointwise baseline that orders the initial lists, and trains
PRM variants under one fixed budget.  Results are cached per process.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from prm import PersonalizationPretrainer, PointwiseRanker, PRMReranker, evaluate_run, export_attention
from prm.data import SynthSpec, generate_synthetic

N_TRAIN, N_TEST, N_PRETRAIN = 5000, 1000, 20000
SEED = 1

PRM_BUDGET = dict(d_model=32, num_heads=2, batch_size=64, max_steps=800, warmup_steps=200,
                  lr_scale=2.0, seed=0)

VARIANTS = {
    "base": {},
    "pv": {"use_pv": True},
    "nope": {"use_pe": False},
    "norc": {"use_residual": False},
    "nodrop": {"use_dropout": False},
}


@dataclass(frozen=True)
class Preset:
    spec: dict
    num_blocks: int = 2
    baseline_steps: int = 1500
    pretrain_steps: int = 600


PRESETS = {
    # category interactions dominate: re-ranking and attention structure
    "interaction": Preset(dict(interaction_scale=8.0, personalization_scale=0.3, position_scale=1.0)),
    # strong per-user-type preferences: personalized vectors
    "personalized": Preset(dict(interaction_scale=8.0, personalization_scale=1.0, position_scale=1.0)),
    # clicks decay with display rank and the production ranker is weak, so the
    # initial position carries information the item features do not
    "position": Preset(dict(interaction_scale=4.0, personalization_scale=0.3, position_scale=2.5),
                       num_blocks=1, baseline_steps=10),
}


@dataclass
class Experiment:
    spec: SynthSpec
    data: object
    train: list
    test: list
    pv_table: dict = None
    models: dict = field(default_factory=dict)


@functools.lru_cache(maxsize=None)
def experiment(preset_name: str) -> Experiment:
    preset = PRESETS[preset_name]
    spec = SynthSpec(n_requests=N_TRAIN + N_TEST, n_pretrain=N_PRETRAIN, **preset.spec)
    raw = generate_synthetic(spec, seed=SEED)
    X = np.array([r.item.features for r in raw.pretrain])
    y = np.array([r.item.label for r in raw.pretrain])
    ranker = PointwiseRanker(max_steps=preset.baseline_steps, batch_size=256, learning_rate=3e-3).fit(X, y)
    data = generate_synthetic(spec, seed=SEED, scorer=ranker.decision_function)
    return Experiment(spec, data, data.rerank[:N_TRAIN], data.rerank[N_TRAIN:])


def pv_table(preset_name: str) -> dict:
    exp = experiment(preset_name)
    if exp.pv_table is None:
        pre = PersonalizationPretrainer(max_steps=PRESETS[preset_name].pretrain_steps,
                                        learning_rate=3e-3).fit(exp.data.pretrain)
        exp.pv_table = pre.transform(exp.data.rerank)
    return exp.pv_table


def model(preset_name: str, variant: str) -> PRMReranker:
    exp = experiment(preset_name)
    if variant not in exp.models:
        kw = {**PRM_BUDGET, "num_blocks": PRESETS[preset_name].num_blocks, **VARIANTS[variant]}
        pv = pv_table(preset_name) if kw.get("use_pv") else None
        exp.models[variant] = PRMReranker(**kw).fit(exp.train, pv_table=pv)
    return exp.models[variant]


def heldout_map(preset_name: str, system) -> float:
    exp = experiment(preset_name)
    pv = exp.pv_table if getattr(getattr(system, "config_", None), "use_pv", False) else None
    metrics, _ = evaluate_run(system, exp.test, pv_table=pv, ks=(exp.spec.n_max,))
    return metrics.map_at[exp.spec.n_max]


def affinity_attention(preset_name: str, variant: str = "base") -> tuple[float, float]:
    """Mean exported attention over planted high-affinity pairs and over zero-affinity pairs."""
    exp = experiment(preset_name)
    truth, C = exp.data.truth, exp.spec.n_categories
    agg = export_attention(model(preset_name, variant), exp.test, "category", n_groups=C)
    hi = [(a, b) for a, b in truth.high_pairs] + [(b, a) for a, b in truth.high_pairs]
    zero = [(a, b) for a in range(C) for b in range(C) if a != b and truth.affinity[a, b] == 0]
    return (float(np.nanmean([agg.matrix[p] for p in hi])),
            float(np.nanmean([agg.matrix[p] for p in zero])))
