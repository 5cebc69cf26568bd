"""Per-task metrics and the cross-task mean-F1 fitness.

Conventions: 0/0 is 0 for precision, recall and F1; label -1 rows are
dropped; a task with no kept rows is excluded from the global mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError

FORMAT_TAG = "# stylemt-metrics 1"


def confusion_matrix(preds, labels, k):
    """k x k counts, rows = true class. Labels of -1 are skipped; predictions
    outside 0..k-1 count as misses for their true class."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    cm = np.zeros((k, k + 1), dtype=np.int64)
    keep = labels >= 0
    p = np.where((preds >= 0) & (preds < k), preds, k)
    np.add.at(cm, (labels[keep], p[keep]), 1)
    return cm


def _div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


@dataclass
class TaskMetrics:
    task: str
    n: int
    accuracy: float = 0.0
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    f1: list = field(default_factory=list)
    support: list = field(default_factory=list)
    weighted_f1: float = 0.0

    @property
    def excluded(self):
        return self.n == 0


def metrics_from_confusion(task, cm):
    k = cm.shape[0]
    n = int(cm.sum())
    if n == 0:
        return TaskMetrics(task, 0)
    tp = np.diag(cm[:, :k]).astype(np.float64)
    pred_tot = cm[:, :k].sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    prec = _div(tp, pred_tot)
    rec = _div(tp, support)
    f1 = _div(2 * prec * rec, prec + rec)
    return TaskMetrics(task, n, float(tp.sum() / n), prec.tolist(), rec.tolist(), f1.tolist(),
                       support.astype(int).tolist(), float((support * f1).sum() / support.sum()))


def task_metrics(preds, labels, k, task=""):
    return metrics_from_confusion(task, confusion_matrix(preds, labels, k))


@dataclass
class MetricsReport:
    tasks: dict = field(default_factory=dict)   # task -> TaskMetrics

    @property
    def excluded(self):
        return [t for t, m in self.tasks.items() if m.excluded]

    def mean_f1(self):
        return mean_f1(self)

    def to_text(self):
        lines = [FORMAT_TAG]
        for name, m in self.tasks.items():
            rec = {"record": "task", "task": name, "n": m.n, "excluded": m.excluded,
                   "accuracy": m.accuracy, "weighted_f1": m.weighted_f1, "precision": m.precision,
                   "recall": m.recall, "f1": m.f1, "support": m.support}
            lines.append(json.dumps(rec))
        try:
            g = mean_f1(self)
        except EvaluationError:
            g = None
        lines.append(json.dumps({"record": "global", "mean_f1": g, "excluded": self.excluded}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0] != FORMAT_TAG:
            raise EvaluationError("missing metrics format tag")
        rep = cls()
        for line in lines[1:]:
            rec = json.loads(line)
            if rec["record"] == "task":
                rep.tasks[rec["task"]] = TaskMetrics(
                    rec["task"], rec["n"], rec["accuracy"], rec["precision"], rec["recall"],
                    rec["f1"], rec["support"], rec["weighted_f1"])
        return rep


def mean_f1(report):
    vals = [m.weighted_f1 for m in report.tasks.values() if not m.excluded]
    if not vals:
        raise EvaluationError("no task has evaluated samples")
    return float(np.mean(vals))


def fold_mean(values):
    """Unweighted mean of per-fold fitness values."""
    values = list(values)
    if not values:
        raise EvaluationError("no folds to aggregate")
    return float(np.mean(values))


def merge_confusions(parts):
    """Shard merge is elementwise sum."""
    out = None
    for p in parts:
        out = p.copy() if out is None else out + p
    return out
