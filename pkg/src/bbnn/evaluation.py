"""Stratified k-fold protocol, confusion matrices and per-genre metrics."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .train import TrainConfig, evaluate_loss, fit

log = logging.getLogger(__name__)


@dataclass
class FoldPlan:
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_folds(labels, k: int = 10, seed: int = 0) -> list[FoldPlan]:
    """Stratified folds: test = bucket i, validation = bucket i+1 (mod k), train = rest.

    Each class is shuffled and dealt round-robin into the k buckets. The dealing
    position carries over from one class to the next, so bucket sizes differ by
    at most one overall.
    """
    if k < 3:
        # test and validation take one bucket each; k=2 would leave nothing to train on
        raise ValueError(f"need k >= 3 folds, got {k}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            warnings.warn(f"class {c} has {len(idx)} samples, fewer than {k} folds", stacklevel=2)
        for i in rng.permutation(idx):
            buckets[cursor % k].append(int(i))
            cursor += 1
    buckets = [np.sort(np.array(b, dtype=np.int64)) for b in buckets]
    plans = []
    for i in range(k):
        v = (i + 1) % k
        train = np.sort(np.concatenate([buckets[j] for j in range(k) if j not in (i, v)]))
        plans.append(FoldPlan(i, train, buckets[v], buckets[i]))
    return plans


def confusion(preds, truths, n_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    preds, truths = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"preds and truths differ in length: {preds.shape} vs {truths.shape}")
    for name, v in (("prediction", preds), ("truth", truths)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} label out of range 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


@dataclass
class Metrics:
    precision: list[float]
    recall: list[float]
    f_score: list[float]
    accuracy: float
    undefined: list[int] = field(default_factory=list)  # classes with a zero denominator

    def averages(self) -> dict[str, float]:
        return {"precision": float(np.mean(self.precision)), "recall": float(np.mean(self.recall)),
                "f_score": float(np.mean(self.f_score))}


def f_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metrics(cm) -> Metrics:
    """Per-class precision, recall and F-score plus accuracy, all in percent."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(cm).astype(float)
    cols, rows = cm.sum(axis=0), cm.sum(axis=1)
    undefined = sorted({int(c) for c in np.flatnonzero(cols == 0)} | {int(c) for c in np.flatnonzero(rows == 0)})
    prec = np.divide(100 * diag, cols, out=np.zeros_like(diag), where=cols > 0)
    rec = np.divide(100 * diag, rows, out=np.zeros_like(diag), where=rows > 0)
    f = [f_score(p, r) for p, r in zip(prec, rec)]
    return Metrics(prec.tolist(), rec.tolist(), f, float(100 * diag.sum() / total), undefined)


@dataclass
class CVReport:
    genres: list[str]
    fold_accuracy: list[float]
    fold_sizes: list[int]
    confusion: np.ndarray
    pooled: Metrics
    logs: list[list] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))

    def to_dict(self) -> dict:
        return {
            "genres": self.genres,
            "folds": [{"fold": i, "accuracy": a, "test_size": n}
                      for i, (a, n) in enumerate(zip(self.fold_accuracy, self.fold_sizes))],
            "mean_accuracy": self.mean_accuracy,
            "pooled_accuracy": self.pooled.accuracy,
            "per_class": [{"genre": g, "precision": p, "recall": r, "f_score": f}
                          for g, p, r, f in zip(self.genres, self.pooled.precision, self.pooled.recall,
                                                self.pooled.f_score)],
            "average": self.pooled.averages(),
            "undefined_classes": self.pooled.undefined,
            "confusion_matrix": self.confusion.tolist(),
            "epoch_logs": [[asdict(e) for e in fold] for fold in self.logs],
        }

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path):
        write_metrics_csv(path, self.genres, self.pooled)


def write_metrics_csv(path, genres, m: Metrics):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["genre", "precision", "recall", "f_score"])
        for g, p, r, fs in zip(genres, m.precision, m.recall, m.f_score):
            w.writerow([g, f"{p:.1f}", f"{r:.1f}", f"{fs:.1f}"])
        avg = m.averages()
        w.writerow(["Average", f"{avg['precision']:.1f}", f"{avg['recall']:.1f}", f"{avg['f_score']:.1f}"])


def cross_validate(x, y, model_builder, train_cfg: TrainConfig = TrainConfig(), k=10, seed=None,
                   genres=None, folds=None, progress=None) -> CVReport:
    """Train a fresh model per fold and pool the test-set confusion matrices.

    ``model_builder(fold_seed)`` must return an untrained model. Fold ``i`` uses
    the seed ``seed ^ i`` for both initialization and shuffling.
    """
    y = np.asarray(y, dtype=np.int64)
    seed = train_cfg.seed if seed is None else seed
    folds = make_folds(y, k, seed) if folds is None else folds
    n_classes = None
    cm, accs, sizes, logs = None, [], [], []
    for plan in folds:
        fold_seed = seed ^ plan.fold
        model = model_builder(fold_seed)
        n_classes = model.n_classes
        cfg = TrainConfig(**{**asdict(train_cfg), "seed": fold_seed})
        model, fold_logs = fit(model, (x[plan.train], y[plan.train]), (x[plan.val], y[plan.val]), cfg)
        _, acc, preds = evaluate_loss(model, x[plan.test], y[plan.test], cfg.batch_size)
        fold_cm = confusion(preds, y[plan.test], n_classes)
        cm = fold_cm if cm is None else cm + fold_cm
        accs.append(100 * acc)
        sizes.append(len(plan.test))
        logs.append(fold_logs)
        log.info("fold %d: accuracy %.1f%% (%d epochs)", plan.fold, 100 * acc, len(fold_logs))
        if progress:
            progress(plan.fold, 100 * acc)
    genres = list(genres) if genres is not None else [str(c) for c in range(n_classes)]
    return CVReport(genres, accs, sizes, cm, metrics(cm), logs)
