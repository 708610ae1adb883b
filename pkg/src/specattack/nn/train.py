"""Training with a stratified 70/30 split, k-fold CV and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import PIXEL_SCALE, ResNetMini, ResNetMiniConfig

log = logging.getLogger(__name__)


class TrainingConfigError(ValueError):
    """Dataset cannot support the requested split or fold count."""


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 3
    folds: int = 5
    test_fraction: float = 0.3


@dataclass
class TrainReport:
    fold_val_accuracy: list = field(default_factory=list)
    fold_best_epoch: list = field(default_factory=list)
    fold_test_accuracy: list = field(default_factory=list)
    mean_test_accuracy: float = 0.0
    final_test_accuracy: float = 0.0
    epochs_run: int = 0
    early_stop_epoch: int | None = None
    train_index: list = field(default_factory=list)
    test_index: list = field(default_factory=list)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class SGD:
    """SGD with classical momentum and L2 weight decay."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def stratified_split(labels, test_fraction, rng):
    """Indices (train, test) with each class split in the same proportion."""
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def stratified_folds(labels, folds, rng):
    """Assign a fold index to every sample, round-robin within each class."""
    labels = np.asarray(labels)
    assign = np.empty(labels.size, dtype=int)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        assign[idx] = np.arange(idx.size) % folds
    return assign


def _loss(model, x, y):
    return ad.cross_entropy(model.logits_graph(Tensor(x * PIXEL_SCALE)), y)


def evaluate(model, x, y, batch_size=64):
    """(mean cross-entropy, accuracy in %) with frozen batch-norm statistics."""
    model.training = False
    total, correct = 0.0, 0
    for i in range(0, len(y), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        z = model.forward(xb)
        total += ad.cross_entropy(Tensor(z), yb, reduction="sum").data.item()
        correct += int((z.argmax(axis=1) == yb).sum())
    return total / len(y), 100.0 * correct / len(y)


def recalibrate_batch_norm(model, x, batch_size=64):
    """Replace running statistics by their exact average over ``x``.

    With few batches per epoch the exponential running averages lag the
    weights, which makes inference-mode accuracy swing between epochs.
    """
    bns = model.batch_norms() if hasattr(model, "batch_norms") else []
    if not bns:
        return
    saved = [bn.momentum for bn in bns]
    model.training = True
    for i, start in enumerate(range(0, len(x), batch_size)):
        for bn in bns:
            bn.momentum = 1.0 / (i + 1)
        model.forward(x[start:start + batch_size])
    for bn, m in zip(bns, saved):
        bn.momentum = m
    model.training = False


def fit(model, x, y, hyper: TrainHyper, epochs: int, rng, x_val=None, y_val=None, patience=None):
    """Run SGD; with validation data, stop after ``patience`` non-improving epochs.

    Returns (best_epoch, history) where best_epoch is 1-based and history holds
    per-epoch validation loss (empty without validation data).  When early
    stopping triggers, parameters are restored to the best epoch.
    """
    opt = SGD(model.parameters(), hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    best, best_epoch, best_state, stale = np.inf, epochs, None, 0
    history = []
    for epoch in range(1, epochs + 1):
        model.training = True
        order = rng.permutation(len(y))
        for i in range(0, len(order), hyper.batch_size):
            b = order[i:i + hyper.batch_size]
            if b.size < 2:
                continue
            opt.zero_grad()
            _loss(model, x[b], y[b]).backward()
            opt.step()
        recalibrate_batch_norm(model, x)
        if x_val is None:
            continue
        val_loss, _ = evaluate(model, x_val, y_val)
        history.append(val_loss)
        if val_loss < best - 1e-9:
            best, best_epoch, stale = val_loss, epoch, 0
            best_state = snapshot(model)
        else:
            stale += 1
            if stale > (hyper.patience if patience is None else patience):
                break
    if best_state is not None:
        restore(model, best_state)
    return best_epoch, history


def snapshot(model):
    return [a.copy() for _, a in model.named_tensors()]


def restore(model, state):
    for (_, a), saved in zip(model.named_tensors(), state):
        a[...] = saved


def _grouped(fn, y, groups, *args):
    """Apply a per-sample splitter at group level and broadcast back to samples."""
    _, first, inverse = np.unique(groups, return_index=True, return_inverse=True)
    return fn(y[first], *args), inverse


def train(config: ResNetMiniConfig, x, y, hyper: TrainHyper = TrainHyper(), groups=None):
    """Cross-validate, then retrain on the full 70 % for the mean best epoch count.

    ``x`` is a (n, 128, 128) pixel array, ``y`` integer labels.  ``groups``
    (optional) ties augmented copies to their source clip so that a group
    never straddles the test split or a fold boundary.  Returns the final
    model and a :class:`TrainReport`.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)
    if len(groups) != len(y):
        raise TrainingConfigError("groups must have one entry per sample")
    _, first = np.unique(groups, return_index=True)
    counts = np.bincount(y[first], minlength=config.classes)
    if counts.min() < hyper.folds:
        raise TrainingConfigError(
            f"every class needs at least {hyper.folds} samples for {hyper.folds}-fold CV; got counts {counts.tolist()}"
        )
    rng = np.random.default_rng(config.seed)
    (g_train, g_test), inverse = _grouped(stratified_split, y, groups, hyper.test_fraction, rng)
    train_idx = np.flatnonzero(np.isin(inverse, g_train))
    test_idx = np.flatnonzero(np.isin(inverse, g_test))
    g_fold, tr_inverse = _grouped(stratified_folds, y[train_idx], inverse[train_idx], hyper.folds, rng)
    fold_of = g_fold[tr_inverse]
    report = TrainReport(train_index=train_idx.tolist(), test_index=test_idx.tolist())
    xt, yt = x[train_idx], y[train_idx]

    for k in range(hyper.folds):
        tr, va = fold_of != k, fold_of == k
        model = ResNetMini(config)
        best_epoch, history = fit(model, xt[tr], yt[tr], hyper, hyper.max_epochs, rng, xt[va], yt[va])
        _, val_acc = evaluate(model, xt[va], yt[va])
        report.fold_val_accuracy.append(val_acc)
        report.fold_best_epoch.append(best_epoch)
        if len(test_idx):
            report.fold_test_accuracy.append(evaluate(model, x[test_idx], y[test_idx])[1])
        log.info("fold %d: best epoch %d, val acc %.2f%%", k, best_epoch, val_acc)

    epochs = max(1, int(round(float(np.mean(report.fold_best_epoch)))))
    model = ResNetMini(config)
    fit(model, xt, yt, hyper, epochs, rng)
    report.epochs_run = epochs
    report.early_stop_epoch = int(max(report.fold_best_epoch))
    if len(test_idx):
        report.final_test_accuracy = evaluate(model, x[test_idx], y[test_idx])[1]
        report.mean_test_accuracy = float(np.mean(report.fold_test_accuracy))
    model.training = False
    return model, report
