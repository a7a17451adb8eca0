"""Cross-entropy, Adam, plateau LR schedule, early stopping and the fit loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np


log = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-4
PROB_CLAMP = 1e-7


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 100
    lr0: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    early_stop_patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    min_lr: float = 1e-5
    # optional: stop as soon as an epoch's mean training loss drops below this
    target_train_loss: float | None = None

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0,1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float


def _labels(labels, n_classes):
    y = np.asarray(labels)
    if y.ndim == 2:
        y = y.argmax(axis=1)
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {y.min()}..{y.max()}")
    return y


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. the logits.

    ``labels`` are class indices or one-hot rows.
    """
    probs = np.asarray(probs)
    n, c = probs.shape
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("probability rows must sum to 1")
    y = _labels(labels, c)
    p = np.clip(probs[np.arange(n), y].astype(np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    grad = probs.copy()
    grad[np.arange(n), y] -= 1
    return float(-np.log(p).mean()), grad / n


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Same as :func:`cross_entropy` but from logits via a stable log-softmax."""
    n, c = logits.shape
    y = _labels(labels, c)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].astype(np.float64).mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1
    return float(loss), grad / logits.dtype.type(n)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, s: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    s.t += 1
    b1, b2 = s.beta1, s.beta2
    c1, c2 = 1 - b1 ** s.t, 1 - b2 ** s.t
    for name, p in params.items():
        g = grads[name]
        if name not in s.m:
            s.m[name] = np.zeros_like(p)
            s.v[name] = np.zeros_like(p)
        m, v = s.m[name], s.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + s.eps)).astype(p.dtype, copy=False)


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr0, factor=0.5, patience=3, min_lr=1e-5, min_delta=IMPROVEMENT_EPS):
        self.lr = lr0
        self.factor, self.patience, self.min_lr, self.min_delta = factor, patience, min_lr, min_delta
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best, self.wait = val_loss, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                if self.lr > self.min_lr:  # never raises an LR that starts below the floor
                    self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


def plateau_scheduler(history, cfg: TrainConfig = TrainConfig()) -> float:
    """LR in effect after replaying the validation-loss ``history``."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    for v in history:
        sched.step(v)
    return sched.lr


def early_stop(history, patience: int, min_delta=IMPROVEMENT_EPS) -> bool:
    """True once the best loss is ``patience`` or more epochs old."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    best, since = np.inf, 0
    for v in history:
        if v < best - min_delta:
            best, since = v, 0
        else:
            since += 1
    return since >= patience


def evaluate_loss(model, x, y, batch_size=8):
    """(mean loss, accuracy, predictions) in inference mode."""
    losses, preds = [], []
    for i in range(0, len(y), batch_size):
        logits = model.logits(x[i:i + batch_size], training=False)
        loss, _ = softmax_cross_entropy(logits, y[i:i + batch_size])
        losses.append(loss * len(logits))
        preds.append(logits.argmax(axis=1))
    preds = np.concatenate(preds)
    return float(np.sum(losses) / len(y)), float((preds == y).mean()), preds


def train_step(model, xb, yb, adam: AdamState, lr: float) -> float:
    logits = model.logits(xb, training=True)
    loss, grad = softmax_cross_entropy(logits, yb)
    if not np.isfinite(loss):
        return loss
    model.backward(grad)
    adam_step(dict(model.named_parameters()), dict(model.named_gradients()), adam, lr)
    return loss


def fit(model, train_set, val_set, cfg: TrainConfig = TrainConfig(), progress=None):
    """Seeded mini-batch training. Returns (model with best-val weights, logs).

    ``train_set``/``val_set`` are (x of shape (N,H,W,1), integer labels).
    """
    x_tr, y_tr = train_set
    x_va, y_va = val_set
    y_tr = _labels(y_tr, model.n_classes)
    y_va = _labels(y_va, model.n_classes)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    logs: list[EpochLog] = []
    best_state, best_loss = None, np.inf
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(y_tr))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = train_step(model, x_tr[idx], y_tr[idx], adam, lr)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            total += loss * len(idx)
        val_loss, val_acc, _ = evaluate_loss(model, x_va, y_va, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        logs.append(EpochLog(epoch, total / len(y_tr), val_loss, val_acc, lr))
        if progress:
            progress(logs[-1])
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.copy() for k, v in model.state().items()}
        sched.step(val_loss)
        if cfg.target_train_loss is not None and logs[-1].train_loss < cfg.target_train_loss:
            break
        if early_stop([e.val_loss for e in logs], cfg.early_stop_patience):
            log.info("early stop after epoch %d", epoch)
            break
    model.load_state(best_state)
    return model, logs


def write_epoch_csv(path, logs):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for e in logs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_accuracy), repr(e.lr)])
