"""Training loop, K-fold protocol and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint
from .data.dataset import Dataset
from .data.splits import SplitMix64
from .errors import ConfigError, DataError, NumericError
from .losses import compute_class_weights, focal_loss, label_counts, weighted_ce
from .metrics import MetricsReport, fold_mean, task_metrics
from .model import MultiTaskModel, build_model
from .optim import clip_grad_norm, cosine_lr, make_optimizer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    epochs: int = 30
    optimizer: str = "adamw"        # sgd_momentum | adamw
    schedule: str = "cosine"        # constant | cosine
    folds: int = 5
    seed: int = 0
    freeze: str = "none"            # none | encoder | encoder+attention
    patience: int = 10
    grad_clip: float = 0.0          # 0 = off
    eval_batch_size: int = 64

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.optimizer not in ("sgd_momentum", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.freeze not in ("none", "encoder", "encoder+attention"):
            raise ConfigError(f"unknown freeze option {self.freeze!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainResult:
    model: MultiTaskModel
    checkpoint: Checkpoint
    history: list
    report: MetricsReport | None = None
    stopped_early: bool = False


def kfold_indices(n, k, seed):
    """K (train, val) pairs; val folds partition 0..n-1 with sizes differing by <= 1."""
    if k < 2:
        raise ConfigError(f"K-fold needs K >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    perm = np.array(SplitMix64.for_stream(seed, "kfold").permutation(n), dtype=np.int64)
    folds = np.array_split(perm, k)
    everything = np.arange(n)
    out = []
    for f in folds:
        val = np.sort(f)
        out.append((np.setdiff1d(everything, val), val))
    return out


def task_class_weights(labels, taxonomy, mode, cap):
    """Per-task weights from the given (training) labels only."""
    out = {}
    for j, task in enumerate(taxonomy.tasks):
        counts = label_counts(labels[:, j], task.n_classes)
        if counts.sum() == 0:
            out[task.name] = np.ones(task.n_classes)
        else:
            out[task.name] = compute_class_weights(counts, mode, cap).weights
    return out


def _loss_fn(cfg):
    if cfg.loss == "focal":
        return lambda lg, y, w: focal_loss(lg, y, w, cfg.focal_gamma)
    return weighted_ce


def _check_taxonomy(model_tax, data_tax):
    if model_tax.to_dict() != data_tax.to_dict():
        raise DataError("dataset taxonomy does not match the model taxonomy")


def _set_modes(model, frozen):
    model.train()
    for g in frozen:
        for m in model.component_modules()[g]:
            m.eval()


def _trainable(model, frozen):
    groups = model.component_modules()
    frozen_ids = {id(t) for g in frozen for m in groups[g] for t in m.parameters()}
    return [p for p in model.parameters() if id(p) not in frozen_ids]


def _step(model, opt, params, frozen, tasks, loss_fn, weights, x, y, clip):
    logits = model.forward(x)
    loss, grads = 0.0, {}
    for j, t in enumerate(tasks):
        lval, g = loss_fn(logits[t], y[:, j], weights[t])
        loss += lval
        grads[t] = g
    loss += model.penalty()
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    opt.zero_grad()
    model.zero_grad()
    model.backward(grads, frozen)
    if clip:
        clip_grad_norm(params, clip)
    opt.step()
    return loss


def train(model_cfg, train_cfg: TrainConfig, data: Dataset, val: Dataset | None = None, model=None):
    """Train on ``data``; with ``val``, early-stop on its mean F1 and keep the best epoch."""
    train_cfg.validate()
    if len(data) == 0:
        raise DataError("empty training set")
    model = model if model is not None else build_model(model_cfg)
    _check_taxonomy(model.taxonomy, data.taxonomy)
    tasks = model.task_names
    weights = task_class_weights(data.labels, model.taxonomy, model_cfg.weight_mode, model_cfg.weight_cap)
    loss_fn = _loss_fn(model_cfg)
    frozen = model.freeze_groups(train_cfg.freeze)
    params = _trainable(model, frozen)
    opt = make_optimizer(train_cfg.optimizer, params, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
    n = len(data)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs

    def snapshot(history):
        return Checkpoint.from_model(model, train_cfg, weights, history)

    history, last_good = [], snapshot([])
    best, best_state, since_best, stopped = -np.inf, None, 0, False
    step = 0
    for epoch in range(train_cfg.epochs):
        _set_modes(model, frozen)
        order = SplitMix64.for_stream(train_cfg.seed, f"epoch-{epoch}").permutation(n)
        running, seen = 0.0, 0
        for b in range(steps_per_epoch):
            idx = np.asarray(order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size])
            lr = cosine_lr(step, total_steps, train_cfg.lr) if train_cfg.schedule == "cosine" else train_cfg.lr
            opt.lr = lr
            x, y = data.images[idx], data.labels[idx]
            try:
                loss = _step(model, opt, params, frozen, tasks, loss_fn, weights, x, y, train_cfg.grad_clip)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {b}: {e}", last_good=last_good) from None
            running += loss * len(idx)
            seen += len(idx)
            step += 1
        rec = {"epoch": epoch, "loss": running / seen, "lr": lr}
        if val is not None:
            score = evaluate(model, val, batch_size=train_cfg.eval_batch_size).mean_f1()
            rec["val_mean_f1"] = score
            if score > best:
                best, since_best = score, 0
                best_state = [t.data.copy() for _, t in model.named_tensors()]
            else:
                since_best += 1
        history.append(rec)
        log.info("epoch %d loss %.4f%s", epoch, rec["loss"],
                 f" val F1 {rec['val_mean_f1']:.4f}" if val is not None else "")
        last_good = snapshot(list(history))
        if val is not None and train_cfg.patience and since_best >= train_cfg.patience:
            stopped = True
            break
    if best_state is not None:
        for (_, t), arr in zip(model.named_tensors(), best_state):
            t.data[...] = arr
    model.eval()
    report = evaluate(model, val, batch_size=train_cfg.eval_batch_size) if val is not None else None
    return TrainResult(model, snapshot(history), history, report, stopped)


def _predict(model, images, tasks, batch_size):
    model.eval()
    out = {t: [] for t in tasks}
    for i in range(0, len(images), batch_size):
        for t, lg in model.forward(images[i:i + batch_size], tasks).items():
            out[t].append(lg.argmax(axis=1))
    return {t: np.concatenate(v) for t, v in out.items()}


def evaluate(model, data: Dataset, tasks=None, labelmap=None, batch_size=64):
    """Metrics in inference mode over enabled heads (optionally a subset).

    With a LabelMap, model predictions for each mapped task are relabelled
    into the data's (target) taxonomy; predictions that map to a dropped
    class count as errors.
    """
    if isinstance(model, Checkpoint):
        model = model.to_model()
    mtax, dtax = model.taxonomy, data.taxonomy
    enabled = model.enabled_tasks()
    if tasks is None:
        tasks = enabled
    else:
        tasks = [t for t in tasks if t in enabled]
    if labelmap is not None:
        if labelmap.target_taxonomy().to_dict() != dtax.to_dict():
            raise DataError("label map target does not match the dataset taxonomy")
        pairs = [(t, t) for t in labelmap.tasks() if t in tasks]
    else:
        pairs = []
        for t in tasks:
            if t not in dtax.names:
                continue
            if dtax.task(t).classes != mtax.task(t).classes:
                raise DataError(f"task {t!r}: dataset classes differ from the model's; supply a label map")
            pairs.append((t, t))
        if not pairs:
            raise DataError("dataset shares no task with the model; supply a label map")
    run = [m for m, _ in pairs]
    preds = _predict(model, data.images, run, batch_size) if run else {}
    report = MetricsReport()
    for mt, dt in pairs:
        p = preds[mt]
        if labelmap is not None:
            src = mtax.task(mt)
            p = np.array([labelmap.map_index(src, int(v)) if src.classes[int(v)] in labelmap.mapping[mt] else -1
                          for v in p], dtype=np.int64)
        j = dtax.names.index(dt)
        report.tasks[dt] = task_metrics(p, data.labels[:, j], dtax.task(dt).n_classes, dt)
    return report


def majority_baseline(train_data: Dataset, test_data: Dataset):
    """Mean F1 of predicting each task's most frequent training class."""
    report = MetricsReport()
    for j, task in enumerate(test_data.taxonomy.tasks):
        counts = label_counts(train_data.labels[:, j], task.n_classes)
        pred = np.full(len(test_data), int(np.argmax(counts)))
        report.tasks[task.name] = task_metrics(pred, test_data.labels[:, j], task.n_classes, task.name)
    return report


def cross_validate(model_cfg, train_cfg: TrainConfig, data: Dataset, folds=None):
    """Mean over folds of the held-out mean F1 (the search fitness)."""
    k = folds or train_cfg.folds
    scores = []
    for tr, va in kfold_indices(len(data), k, train_cfg.seed):
        res = train(model_cfg, train_cfg, data.subset(tr))
        scores.append(evaluate(res.model, data.subset(va), batch_size=train_cfg.eval_batch_size).mean_f1())
    return fold_mean(scores), scores
