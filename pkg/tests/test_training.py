import numpy as np
import pytest

from prm import autodiff as ad
from prm.training import AdamState, TrainConfig, TrainingError, adam_step, lr_at, train_loop


def test_lr_schedule_shape():
    d, w = 64, 100
    assert lr_at(1, d, w) == pytest.approx(d ** -0.5 * w ** -1.5)
    assert lr_at(w, d, w) == pytest.approx(d ** -0.5 * w ** -0.5)
    assert lr_at(4 * w, d, w) == pytest.approx(d ** -0.5 * (4 * w) ** -0.5)
    assert lr_at(w, d, w) > lr_at(w - 1, d, w) and lr_at(w, d, w) > lr_at(w + 1, d, w)
    with pytest.raises(ValueError):
        lr_at(0, d, w)


def reference_adam(x, grads, lr, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(2, 3)) for _ in range(5)]
    params = {"w": np.ones((2, 3))}
    state = AdamState()
    for g in grads:
        adam_step(params, {"w": g}, state, 0.01)
    np.testing.assert_allclose(params["w"], reference_adam(np.ones((2, 3)), grads, 0.01, 0.9, 0.98, 1e-9),
                               rtol=1e-12)


def test_adam_rejects_nan():
    with pytest.raises(TrainingError, match="step 1.*'w'"):
        adam_step({"w": np.zeros((1, 1))}, {"w": np.array([[np.nan]])}, AdamState(), 0.1)


def _quadratic_setup(target):
    def loss_fn(nodes, batch, step):
        diff = ad.sub(nodes["w"], ad.constant(target))
        return ad.sum_all(ad.mul(diff, diff))

    return loss_fn, (lambda epoch: iter(range(10)))


def test_train_loop_minimizes_and_logs():
    target = np.array([[1.0, -2.0]])
    loss_fn, batches = _quadratic_setup(target)
    cfg = TrainConfig(max_steps=400, schedule="constant", learning_rate=0.05)
    lines = []
    best, log = train_loop({"w": np.zeros((1, 2))}, loss_fn, batches, cfg, log_sink=lines.append)
    np.testing.assert_allclose(best["w"], target, atol=1e-2)
    assert len(log) == 400 and lines == log
    assert '"step": 1' in log[0]


def test_train_loop_keeps_best_and_early_stops():
    target = np.array([[1.0]])
    loss_fn, batches = _quadratic_setup(target)
    scores = iter([0.5, 0.9, 0.1, 0.1, 0.1])
    cfg = TrainConfig(max_steps=1000, schedule="constant", learning_rate=0.01, patience=2)
    snapshots = []

    def validate(p):
        snapshots.append(p["w"].copy())
        return {"val_map": next(scores), "val_p5": 0.0}

    best, log = train_loop({"w": np.zeros((1, 1))}, loss_fn, batches, cfg, validate=validate)
    assert len(snapshots) == 4   # improvement at epoch 2, then two stale epochs
    np.testing.assert_array_equal(best["w"], snapshots[1])
    assert sum('"epoch"' in l for l in log) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine").validate()
