"""PRM network: input projection, stacked self-attention encoder, softmax scorer.

Batches of lists are flattened to one ``(B*L) x d`` matrix.  Self-attention
runs inside each list only, and padded rows are never attended to.  The scores of one list
therefore do not depend on what else is in the batch.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node

__all__ = [
    "PrmConfig", "ConfigurationError", "CapacityError", "init_params",
    "param_nodes", "input_layer", "attention", "multi_head", "encoder_block", "encode", "output_scores",
    "listwise_loss", "forward", "list_mask", "rank_order", "save_checkpoint",
    "load_checkpoint", "checkpoint_bytes",
]

FORMAT_VERSION = 1
LN_EPS = 1e-6
SCORE_LOG_FLOOR = 1e-300


class ConfigurationError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass
class PrmConfig:
    d_feature: int
    d_pv: int = 0
    d: int = 64
    n_max: int = 30
    num_blocks: int = 4
    num_heads: int = 3
    ffn_inner: Optional[int] = None
    dropout: float = 0.1
    use_pe: bool = True
    use_pv: bool = True
    use_residual: bool = True
    use_dropout: bool = True
    head_style: str = "paper_literal"

    def __post_init__(self):
        if self.ffn_inner is None:
            self.ffn_inner = 4 * self.d
        if not self.use_pv:
            self.d_pv = 0
        self.validate()

    def validate(self) -> None:
        if self.d < 1 or self.num_heads < 1 or self.num_blocks < 1:
            raise ConfigurationError("d, num_heads and num_blocks must be positive")
        if self.d_feature < 1 or self.n_max < 1:
            raise ConfigurationError("d_feature and n_max must be positive")
        if self.use_pv and self.d_pv < 1:
            raise ConfigurationError("use_pv=True needs d_pv >= 1")
        if self.head_style not in ("paper_literal", "split"):
            raise ConfigurationError(f"unknown head_style {self.head_style!r}")
        if self.head_style == "split" and self.d % self.num_heads:
            raise ConfigurationError(f"split heads need num_heads | d (d={self.d}, h={self.num_heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def d_input(self) -> int:
        return self.d_feature + self.d_pv

    @property
    def d_head(self) -> int:
        return self.d if self.head_style == "paper_literal" else self.d // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PrmConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- parameters ------------------------------------------------------------

def _glorot(rng, rows, cols):
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, (rows, cols))


def init_params(config: PrmConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains, zero PE."""
    rng = np.random.default_rng(seed)
    d, dh, h = config.d, config.d_head, config.num_heads
    p = {
        "input.we": _glorot(rng, config.d_input, d),
        "input.be": np.zeros((1, d)),
    }
    if config.use_pe:
        p["input.pe"] = np.zeros((config.n_max, config.d_input))
    for k in range(config.num_blocks):
        for j in range(h):
            for m in ("wq", "wk", "wv"):
                p[f"block{k}.head{j}.{m}"] = _glorot(rng, d, dh)
        p[f"block{k}.wo"] = _glorot(rng, h * dh, d)
        p[f"block{k}.ffn.w1"] = _glorot(rng, d, config.ffn_inner)
        p[f"block{k}.ffn.b1"] = np.zeros((1, config.ffn_inner))
        p[f"block{k}.ffn.w2"] = _glorot(rng, config.ffn_inner, d)
        p[f"block{k}.ffn.b2"] = np.zeros((1, d))
        for ln in ("ln1", "ln2"):
            p[f"block{k}.{ln}.gain"] = np.ones((1, d))
            p[f"block{k}.{ln}.bias"] = np.zeros((1, d))
    p["output.wf"] = _glorot(rng, d, 1)
    p["output.bf"] = np.zeros((1, 1))
    return p


def param_nodes(params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Node]:
    make = ad.parameter if trainable else ad.constant
    return {k: make(v, name=k) for k, v in params.items()}


# -- layers ----------------------------------------------------------------

def list_mask(mask: np.ndarray) -> np.ndarray:
    """Full block-diagonal attention mask for a flattened ``(B, L)`` batch.

    Entry ``[a, b]`` is True when rows a and b belong to the same list and row
    b is a real item.  The encoder never builds it; it serves as a reference.
    """
    B, L = mask.shape
    same = np.kron(np.eye(B, dtype=bool), np.ones((L, L), dtype=bool))
    return same & np.asarray(mask, dtype=bool).reshape(1, B * L)


def input_layer(X: Node, PV: Optional[Node], positions: np.ndarray, params: dict, config: PrmConfig) -> Node:
    """Concatenate features and personalized vectors, add position embeddings, project to ``d``."""
    if positions.size and positions.max() >= config.n_max:
        raise CapacityError(f"list position {int(positions.max()) + 1} exceeds n_max={config.n_max}")
    if config.use_pv:
        if PV is None:
            raise ConfigurationError("model was configured with use_pv=True but no PV was given")
        E = ad.concat_cols([X, PV])
    else:
        E = X
    if E.shape[1] != config.d_input:
        raise ConfigurationError(f"input width {E.shape[1]} != d_feature + d_pv = {config.d_input}")
    if config.use_pe:
        E = E + ad.gather_rows(params["input.pe"], positions)
    return ad.matmul(E, params["input.we"]) + params["input.be"]


def attention(Q: Node, K: Node, V: Node, mask: Optional[np.ndarray] = None):
    """Scaled dot-product attention; returns ``(output, weights)``."""
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ad.DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} are inconsistent")
    logits = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.shape[1]))
    weights = ad.softmax_rows(logits, mask)
    return ad.matmul(weights, V), weights


def multi_head(E: Node, params: dict, block: int, config: PrmConfig, mask: np.ndarray):
    """Multi-head self-attention within each list.

    ``mask`` is the ``(B, L)`` real-item mask of the flattened batch ``E``.
    Returns ``(S', weights)`` with per-head weights shaped ``(B, L, L)``.
    """
    heads, weights = [], []
    for j in range(config.num_heads):
        pre = f"block{block}.head{j}."
        out, w = ad.list_attention(ad.matmul(E, params[pre + "wq"]), ad.matmul(E, params[pre + "wk"]),
                                   ad.matmul(E, params[pre + "wv"]), mask)
        heads.append(out)
        weights.append(w)
    cat = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
    return ad.matmul(cat, params[f"block{block}.wo"]), weights


def encoder_block(E: Node, params: dict, block: int, config: PrmConfig, mask: np.ndarray,
                  training: bool = False, dropout_key=None):
    """Post-norm block: attention then position-wise FFN, each with dropout, residual and layer norm."""
    p = config.dropout if config.use_dropout else 0.0

    def key(slot):
        return None if dropout_key is None else (*dropout_key, 2 * block + slot)

    pre = f"block{block}."
    mh, weights = multi_head(E, params, block, config, mask)
    mh = ad.dropout(mh, p, training, key(0))
    S = ad.layer_norm(E + mh if config.use_residual else mh,
                      params[pre + "ln1.gain"], params[pre + "ln1.bias"], LN_EPS)
    hidden = ad.relu(ad.matmul(S, params[pre + "ffn.w1"]) + params[pre + "ffn.b1"])
    ff = ad.matmul(hidden, params[pre + "ffn.w2"]) + params[pre + "ffn.b2"]
    ff = ad.dropout(ff, p, training, key(1))
    F = ad.layer_norm(S + ff if config.use_residual else ff,
                      params[pre + "ln2.gain"], params[pre + "ln2.bias"], LN_EPS)
    return F, weights


def encode(E: Node, params: dict, config: PrmConfig, mask: np.ndarray, training: bool = False,
           dropout_key=None):
    """Apply all blocks; attention comes back as ``[N_x, h, B, L, L]``."""
    all_w = []
    F = E
    for k in range(config.num_blocks):
        F, w = encoder_block(F, params, k, config, mask, training, dropout_key)
        all_w.append(w)
    return F, np.asarray(all_w)


def output_scores(F: Node, params: dict, mask: np.ndarray) -> Node:
    """Per-list softmax of ``F W^F + b^F``; ``mask`` is ``(B, L)``, result is ``(B, L)``."""
    B, L = mask.shape
    logits = ad.matmul(F, params["output.wf"]) + params["output.bf"]
    return ad.softmax_rows(ad.reshape(logits, B, L), mask)


def listwise_loss(scores: Node, labels: np.ndarray, mask: np.ndarray, normalize: bool = False) -> Node:
    """Negative log-score summed over clicked items of every list.

    With ``normalize`` the sum is divided by the number of lists.
    """
    y = np.where(mask, labels, 0.0)
    loss = ad.scale(ad.sum_all(ad.mul(ad.log(scores, SCORE_LOG_FLOOR), ad.constant(y))), -1.0)
    if normalize:
        loss = ad.scale(loss, 1.0 / max(1, mask.shape[0]))
    return loss


def forward(params: dict, config: PrmConfig, X: np.ndarray, PV: Optional[np.ndarray], mask: np.ndarray,
            training: bool = False, dropout_key=None, collect_attention: bool = False):
    """Score a padded batch.

    ``X`` is ``(B, L, d_feature)``, ``PV`` is ``(B, L, d_pv)`` or None.
    Returns ``(scores_node, attention)``; attention is ``[N_x, h, B, L, L]`` when
    requested, else None.
    """
    ad.op_counter.tick("prm_forward_calls")
    ad.op_counter.tick("prm_forward_lists", X.shape[0])
    params = {k: v if isinstance(v, Node) else ad.constant(v, name=k) for k, v in params.items()}
    B, L = mask.shape
    if L > config.n_max:
        raise CapacityError(f"list length {L} exceeds n_max={config.n_max}")
    Xn = ad.constant(X.reshape(B * L, -1))
    PVn = ad.constant(PV.reshape(B * L, -1)) if (config.use_pv and PV is not None) else None
    positions = np.tile(np.arange(L), B)
    E = input_layer(Xn, PVn, positions, params, config)
    F, weights = encode(E, params, config, mask, training, dropout_key)
    scores = output_scores(F, params, mask)
    return scores, (weights if collect_attention else None)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep initial-list order."""
    return np.argsort(-np.asarray(scores), kind="stable")


# -- checkpoints -----------------------------------------------------------

def checkpoint_dict(params: dict, config: PrmConfig, extra: Optional[dict] = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": {k: {"rows": int(v.shape[0]), "cols": int(v.shape[1]),
                        "data": [float(x) for x in np.asarray(v).ravel()]}
                    for k, v in params.items()},
    }
    if extra:
        doc.update(extra)
    return doc


def checkpoint_bytes(params: dict, config: PrmConfig, extra: Optional[dict] = None) -> bytes:
    return json.dumps(checkpoint_dict(params, config, extra), sort_keys=True).encode()


def save_checkpoint(path, params: dict, config: PrmConfig, extra: Optional[dict] = None) -> str:
    """Write the checkpoint; returns its SHA-256."""
    blob = checkpoint_bytes(params, config, extra)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def tensors_from_dict(doc: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, t in doc["tensors"].items():
        out[name] = np.asarray(t["data"], dtype=np.float64).reshape(t["rows"], t["cols"])
    return out


def load_checkpoint(path):
    """Return ``(params, config, document)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    return tensors_from_dict(doc), PrmConfig.from_dict(doc["config"]), doc
