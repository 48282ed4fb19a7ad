"""Training loop with early stopping and repeated split evaluation."""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nncore as nn
from .bagio import split_stratified
from .dagnet import DagModel, bag_loss, forward_bag
from .exceptions import ConfigError, InputError, NumericalError
from .metrics import accuracy, auc_ovr, weighted_f1

log = logging.getLogger(__name__)

METRICS = ("acc", "f1", "auc")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 70
    patience: int = 30
    seeds: tuple = (0, 1, 2, 3, 4)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if not 0 <= self.patience <= self.epochs:
            raise ConfigError(f"patience must lie in [0, epochs], got {self.patience}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must not be empty")
        return self


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    stopped_epoch: int = 0

    def to_dict(self):
        return asdict(self)


def predict_proba(bags, model):
    return np.stack([forward_bag(b, model).probabilities() for b in bags])


def predict(bags, model):
    return predict_proba(bags, model).argmax(axis=1)


def _by_id(bags):
    index = {b.id: b for b in bags}
    if len(index) != len(bags):
        raise InputError("bag ids are not unique")
    return index


def train(bags, split, model, config=None, seed=0, val_accuracy=None):
    """Fit ``model`` in place on ``split.train``; returns ``(model, history)``.

    One Adam step per bag, training order reshuffled every epoch.  The
    parameters with the best validation accuracy (earliest on ties) are
    restored at the end.  ``val_accuracy`` overrides how validation accuracy
    is measured (a callable of the model).
    """
    config = (config or TrainConfig()).validate()
    index = _by_id(bags)
    train_bags = [index[i] for i in split.train]
    val_bags = [index[i] for i in split.val]
    if not train_bags or (not val_bags and val_accuracy is None):
        raise InputError("train and validation parts must be non-empty")
    if val_accuracy is None:
        labels = np.array([b.label for b in val_bags])

        def val_accuracy(m):
            return accuracy(predict(val_bags, m), labels)

    rng = np.random.default_rng(seed)
    store = model.params
    history = History()
    best_state = store.state_dict()
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for j in rng.permutation(len(train_bags)):
            bag = train_bags[j]
            try:
                loss, _ = bag_loss(bag, model)
            except NumericalError as exc:
                raise NumericalError(f"bag {bag.id!r} at epoch {epoch}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss on bag {bag.id!r} at epoch {epoch}")
            nn.backward(loss)
            nn.adam_step(store, config.lr, config.weight_decay,
                         config.beta1, config.beta2, config.eps)
            total += value
        history.train_loss.append(total / len(train_bags))
        acc = float(val_accuracy(model))
        history.val_acc.append(acc)
        if acc > history.best_val_acc:
            history.best_val_acc = acc
            history.best_epoch = epoch
            best_state = store.state_dict()
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch, history.train_loss[-1], acc)
        history.stopped_epoch = epoch
        if epoch - history.best_epoch >= config.patience:
            break
    store.load_state_dict(best_state)
    return model, history


def evaluate(bags, model, n_classes=None):
    """Accuracy, weighted F1 and OvR AUC of ``model`` on ``bags``."""
    n_classes = n_classes or model.config.n_classes
    labels = np.array([b.label for b in bags])
    proba = predict_proba(bags, model)
    preds = proba.argmax(axis=1)
    return {
        "acc": accuracy(preds, labels),
        "f1": weighted_f1(preds, labels, n_classes),
        "auc": auc_ovr(proba, labels, n_classes),
    }


@dataclass
class EvalReport:
    """Per-run metrics plus mean and population standard deviation."""

    runs: list

    @property
    def mean(self):
        return {m: statistics.fmean(r[m] for r in self.runs) for m in METRICS}

    @property
    def std(self):
        # exact rational arithmetic, so identical runs give a std of exactly 0
        return {m: statistics.pstdev([r[m] for r in self.runs]) for m in METRICS}

    def to_dict(self):
        return {"runs": self.runs, "mean": self.mean, "std": self.std}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        return cls(runs=list(data["runs"]))

    def table_row(self, name="DAG"):
        """``name  ACC mean_{std}  F1 ...  AUC ...`` in percent."""
        mean, std = self.mean, self.std
        cells = [f"{label} {100 * mean[m]:.2f}_{{{100 * std[m]:.2f}}}"
                 for label, m in (("ACC", "acc"), ("F1", "f1"), ("AUC", "auc"))]
        return "  ".join([name] + cells)


def run_one(bags, dag_config, train_config, seed):
    """Split, initialise, train and test for one seed."""
    manifest = [(b.id, b.label) for b in bags]
    split = split_stratified(manifest, seed=seed)
    model = DagModel(dag_config, seed=seed)
    model, history = train(bags, split, model, train_config, seed=seed)
    index = _by_id(bags)
    metrics = evaluate([index[i] for i in split.test], model)
    run = {"seed": int(seed), **metrics}
    return run, model, history, split


def _run_one_job(args):
    bags, dag_config, train_config, seed = args
    run, model, history, _ = run_one(bags, dag_config, train_config, seed)
    return run, model.params.state_dict(), history


def run_repeated(bags, dag_config, train_config=None, jobs=1, keep_models=False):
    """Repeat split/train/test over ``train_config.seeds``.

    Returns the :class:`EvalReport`, or ``(report, states, histories)`` when
    ``keep_models`` is set, with ``states`` the trained parameter dicts.
    """
    train_config = (train_config or TrainConfig()).validate()
    seeds = list(train_config.seeds)
    tasks = [(bags, dag_config, train_config, s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_job, tasks))
    else:
        results = [_run_one_job(t) for t in tasks]
    report = EvalReport(runs=[r for r, _, _ in results])
    if keep_models:
        return report, [s for _, s, _ in results], [h for _, _, h in results]
    return report


def with_seeds(config, seeds):
    return replace(config, seeds=tuple(int(s) for s in seeds))
