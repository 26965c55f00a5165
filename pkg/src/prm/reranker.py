"""Estimator wrapper around the PRM network."""
from __future__ import annotations

import hashlib
import json
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model as prm
from .data.batching import batch_iter, make_batch
from .data.schema import RerankRecord
from .metrics import map_at_k, precision_at_k
from .training import TrainConfig, train_loop
from .validation import check_pv_table, check_rerank_records

__all__ = ["PRMReranker"]

_CONFIG_PARAMS = ("num_blocks", "num_heads", "ffn_inner", "dropout", "use_pe", "use_pv",
                  "use_residual", "use_dropout", "head_style")


class PRMReranker(BaseEstimator):
    """Personalized re-ranker: self-attention over the initial list, softmax scores per list.

    Parameters
    ----------
    d_model : int, default=64
        Latent width ``d`` of the encoder.
    num_blocks, num_heads : int, default=4, 3
    ffn_inner : int or None
        Inner FFN width, ``4 * d_model`` when None.
    dropout : float, default=0.1
    use_pe, use_pv, use_residual, use_dropout : bool
        Component switches used by the ablations.  ``use_pv`` needs a
        personalized-vector table at fit and predict time.
    head_style : {"paper_literal", "split"}
        Full-width ``d x d`` projections per head, or ``d / h`` slices.
    n_max : int or None
        Position-embedding capacity; the longest training list when None.
    normalize_loss : bool, default=False
        Divide the summed listwise loss by the number of lists in the batch.
    batch_size, max_steps, max_epochs, warmup_steps, lr_scale, schedule, learning_rate,
    beta1, beta2, eps, patience, clip_norm, seed
        Optimization settings, see :class:`prm.training.TrainConfig`.
    """

    def __init__(self, d_model=64, num_blocks=4, num_heads=3, ffn_inner=None, dropout=0.1,
                 use_pe=True, use_pv=False, use_residual=True, use_dropout=True,
                 head_style="paper_literal", n_max=None, normalize_loss=False, batch_size=256,
                 max_steps=1000, max_epochs=None, warmup_steps=4000, lr_scale=1.0, schedule="noam",
                 learning_rate=1e-3, beta1=0.9, beta2=0.98, eps=1e-9, patience=None, clip_norm=None,
                 seed=0, eval_batch_size=256):
        self.d_model = d_model
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.ffn_inner = ffn_inner
        self.dropout = dropout
        self.use_pe = use_pe
        self.use_pv = use_pv
        self.use_residual = use_residual
        self.use_dropout = use_dropout
        self.head_style = head_style
        self.n_max = n_max
        self.normalize_loss = normalize_loss
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.max_epochs = max_epochs
        self.warmup_steps = warmup_steps
        self.lr_scale = lr_scale
        self.schedule = schedule
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.patience = patience
        self.clip_norm = clip_norm
        self.seed = seed
        self.eval_batch_size = eval_batch_size

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, max_steps=self.max_steps, max_epochs=self.max_epochs,
                           warmup_steps=self.warmup_steps, lr_scale=self.lr_scale, schedule=self.schedule,
                           learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
                           eps=self.eps, seed=self.seed, patience=self.patience, clip_norm=self.clip_norm)

    def build_config(self, d_feature: int, d_pv: int, n_max: int) -> prm.PrmConfig:
        kw = {k: getattr(self, k) for k in _CONFIG_PARAMS}
        return prm.PrmConfig(d_feature=d_feature, d_pv=d_pv if self.use_pv else 0, d=self.d_model,
                             n_max=n_max, **kw)

    def _pv_width(self, pv_table) -> int:
        if not self.use_pv:
            return 0
        if not pv_table:
            raise ValueError("use_pv=True needs a non-empty pv_table")
        return len(next(iter(pv_table.values())))

    def fit(self, records: Sequence[RerankRecord], y=None, pv_table: Optional[Mapping] = None,
            validation: Optional[Sequence[RerankRecord]] = None, validation_pv: Optional[Mapping] = None,
            log_sink=None):
        """Train on click-labelled initial lists.

        With ``validation`` records, MAP@n_max is computed after each epoch and
        the best parameters are kept (early stopping with ``patience``).
        """
        records = check_rerank_records(records)
        if not records:
            raise ValueError("cannot fit on an empty record set")
        d_feature = len(records[0].items[0].features)
        n_max = self.n_max or max(len(r.items) for r in records)
        check_rerank_records(records, d_feature, n_max)
        d_pv = self._pv_width(pv_table)
        if self.use_pv:
            check_pv_table(pv_table, records, d_pv)
        config = self.build_config(d_feature, d_pv, n_max)
        cfg = self._train_config()
        params = prm.init_params(config, self.seed)
        table = pv_table if self.use_pv else None

        def batches(epoch):
            return batch_iter(records, cfg.batch_size, shuffle_seed=[self.seed, epoch], pv_table=table)

        def loss_fn(nodes, batch, step):
            scores, _ = prm.forward(nodes, config, batch.X, batch.PV, batch.mask, training=True,
                                    dropout_key=(self.seed, step))
            return prm.listwise_loss(scores, batch.labels, batch.mask, self.normalize_loss)

        validate = None
        if validation is not None:
            validation = check_rerank_records(validation, d_feature, n_max)
            vpv = validation_pv if validation_pv is not None else pv_table

            def validate(p):
                ranked = self._ranked_labels(validation, self._scores_with(p, config, validation, vpv))
                return {"val_map": map_at_k(ranked, n_max), "val_p5": precision_at_k(ranked, 5)}

        self.config_ = config
        self.params_, self.log_ = train_loop(params, loss_fn, batches, cfg, d_model=config.d,
                                             validate=validate, log_sink=log_sink)
        self.n_features_in_ = d_feature
        return self

    # -- inference -----------------------------------------------------

    def _scores_with(self, params, config, records, pv_table, attention=False):
        out, att = [], []
        table = pv_table if config.use_pv else None
        for lo in range(0, len(records), self.eval_batch_size):
            chunk = records[lo:lo + self.eval_batch_size]
            batch = make_batch(chunk, table, d_pv=config.d_pv or None)
            scores, a = prm.forward(params, config, batch.X, batch.PV, batch.mask, collect_attention=attention)
            for b, rec in enumerate(chunk):
                n = len(rec.items)
                out.append(scores.value[b, :n].copy())
                if attention:
                    att.append(a[:, :, b, :n, :n].copy())
        return (out, att) if attention else out

    def _prepare(self, records, pv_table):
        check_is_fitted(self, "params_")
        records = check_rerank_records(records, self.config_.d_feature, self.config_.n_max)
        if self.config_.use_pv:
            check_pv_table(pv_table, records, self.config_.d_pv)
        return records

    def predict_scores(self, records, pv_table=None) -> list[np.ndarray]:
        """Softmax score of every item, per request, in initial-list order."""
        records = self._prepare(records, pv_table)
        return self._scores_with(self.params_, self.config_, records, pv_table)

    def predict(self, records, pv_table=None) -> list[np.ndarray]:
        """Re-ranked item indices per request (descending score, stable on ties)."""
        return [prm.rank_order(s) for s in self.predict_scores(records, pv_table)]

    def attention_weights(self, records, pv_table=None) -> list[np.ndarray]:
        """Per request, attention weights shaped ``[num_blocks, num_heads, n, n]``."""
        records = self._prepare(records, pv_table)
        return self._scores_with(self.params_, self.config_, records, pv_table, attention=True)[1]

    def score(self, records, y=None, pv_table=None) -> float:
        """MAP@n_max of the re-ranked lists."""
        records = self._prepare(records, pv_table)
        return map_at_k(self._ranked_labels(records, self.predict_scores(records, pv_table)),
                        self.config_.n_max)

    @staticmethod
    def _ranked_labels(records, scores):
        return [[rec.items[k].label for k in prm.rank_order(s)] for rec, s in zip(records, scores)]

    # -- persistence ---------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        check_is_fitted(self, "params_")
        return prm.checkpoint_bytes(self.params_, self.config_, {"estimator": self._json_params()})

    def _json_params(self) -> dict:
        return json.loads(json.dumps(self.get_params()))

    def save(self, path) -> str:
        """Write a checkpoint and return its SHA-256."""
        blob = self.checkpoint_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path) -> "PRMReranker":
        params, config, doc = prm.load_checkpoint(path)
        est = cls(**doc.get("estimator", {}))
        est.params_ = params
        est.config_ = config
        est.n_features_in_ = config.d_feature
        est.log_ = []
        return est

    @classmethod
    def from_params(cls, params: dict, config: prm.PrmConfig, **kwargs) -> "PRMReranker":
        est = cls(d_model=config.d, n_max=config.n_max,
                  **{k: getattr(config, k) for k in _CONFIG_PARAMS}, **kwargs)
        est.params_ = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        est.config_ = config
        est.n_features_in_ = config.d_feature
        est.log_ = []
        return est
