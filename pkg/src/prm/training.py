"""Optimizer, learning-rate schedule and the shared training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad

__all__ = ["TrainConfig", "AdamState", "TrainingError", "lr_at", "adam_step", "train_loop"]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_steps: int = 1000
    max_epochs: Optional[int] = None
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    schedule: str = "noam"          # "noam" or "constant"
    learning_rate: float = 1e-3     # used by the constant schedule
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    patience: Optional[int] = None  # epochs without validation MAP gain before stopping
    checkpoint_interval: Optional[int] = None
    clip_norm: Optional[float] = None

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup_steps < 1:
            raise ValueError("batch_size, warmup_steps must be positive and max_steps nonnegative")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.schedule not in ("noam", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, d: int, warmup: int) -> float:
    """Inverse-square-root schedule with linear warmup, peaking at ``step == warmup``."""
    if step < 1:
        raise ValueError(f"learning-rate step counts from 1, got {step}")
    return d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to the arrays in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at step {state.step + 1} in tensor {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _learning_rate(cfg: TrainConfig, step: int, d_model: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.lr_scale * lr_at(step, d_model, cfg.warmup_steps)


def train_loop(
    params: dict,
    loss_fn: Callable[[dict, object, int], ad.Node],
    batches: Callable[[int], Iterable],
    cfg: TrainConfig,
    d_model: int = 1,
    validate: Optional[Callable[[dict], dict]] = None,
    log_sink: Optional[Callable[[str], None]] = None,
    on_checkpoint: Optional[Callable[[int, dict], None]] = None,
) -> tuple[dict, list]:
    """Minimize ``loss_fn`` with Adam.

    ``batches(epoch)`` yields the batches of one epoch; ``loss_fn(nodes, batch,
    step)`` builds the scalar loss graph.  When ``validate`` is given it runs
    after every epoch and must return ``{"val_map": ..., "val_p5": ...}``; the
    parameters with the best ``val_map`` are returned.  The log is a list of
    canonical JSON lines.
    """
    cfg.validate()
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    state = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    lines: list[str] = []

    def emit(rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True)
        lines.append(line)
        if log_sink is not None:
            log_sink(line)

    best = {k: v.copy() for k, v in params.items()}
    best_map = -math.inf
    stale = 0
    step = 0
    epoch = 0
    while step < cfg.max_steps and (cfg.max_epochs is None or epoch < cfg.max_epochs):
        progressed = False
        for batch in batches(epoch):
            if step >= cfg.max_steps:
                break
            progressed = True
            step += 1
            nodes = {k: ad.parameter(v, name=k) for k, v in params.items()}
            loss = loss_fn(nodes, batch, step)
            ad.backward(loss)
            grads = {k: n.grad for k, n in nodes.items()}
            if cfg.clip_norm is not None:
                total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if total > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / total) for k, g in grads.items()}
            lr = _learning_rate(cfg, step, d_model)
            adam_step(params, grads, state, lr)
            emit({"step": step, "lr": lr, "loss": float(loss.value[0, 0])})
            if on_checkpoint is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                on_checkpoint(step, params)
        if not progressed:
            break
        epoch += 1
        if validate is None:
            continue
        metrics = validate(params)
        emit({"epoch": epoch, "val_map": metrics["val_map"], "val_p5": metrics["val_p5"]})
        if metrics["val_map"] > best_map:
            best_map = metrics["val_map"]
            best = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                log.info("early stop after epoch %d (no MAP gain for %d epochs)", epoch, stale)
                break
    if validate is None:
        best = params
    return best, lines
