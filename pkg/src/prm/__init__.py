"""Personalized re-ranking of recommendation lists with a self-attention encoder."""
from .baseline import PointwiseRanker, build_initial_lists
from .evaluation import (AttentionAggregate, IdentityReranker, LabelOracleReranker, evaluate_run,
                         export_attention)
from .metrics import RankingMetrics, conventional_map_at_k, map_at_k, precision_at_k
from .model import PrmConfig
from .pretrain import PersonalizationPretrainer
from .reranker import PRMReranker
from .training import TrainConfig, adam_step, lr_at

__version__ = "0.1.0"

__all__ = [
    "PointwiseRanker", "build_initial_lists", "AttentionAggregate", "IdentityReranker",
    "LabelOracleReranker", "evaluate_run", "export_attention", "RankingMetrics",
    "conventional_map_at_k", "map_at_k", "precision_at_k", "PrmConfig", "PersonalizationPretrainer",
    "PRMReranker", "TrainConfig", "adam_step", "lr_at",
]
