"""scikit-learn compatible wrapper around :mod:`dagmil.dagnet`.

``X`` is a sequence of bags.  Each element may be a :class:`~dagmil.bagio.Bag`
or a ``(features, coords)`` pair; ``y`` holds integer class labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.multiclass import unique_labels

from .bagio import Bag, split_stratified
from .dagnet import DagConfig, DagModel, attention_heatmap, forward_bag
from .exceptions import InputError
from .trainer import TrainConfig, train


def check_bag(bag, n_features=None, label=0, bag_id=""):
    """Coerce ``bag`` to a :class:`Bag`, validating shapes and finiteness."""
    if isinstance(bag, Bag):
        out = bag
    else:
        try:
            features, coords = bag
        except (TypeError, ValueError) as exc:
            raise InputError("a bag must be a Bag or a (features, coords) pair") from exc
        features = np.asarray(features, dtype=np.float64)
        coords = np.asarray(coords, dtype=np.float64)
        if not np.all(np.isfinite(features)):
            raise InputError(f"bag {bag_id!r}: features contain NaN or Inf")
        out = Bag(features, coords, label, bag_id)
    if n_features is not None and out.dim != n_features:
        raise InputError(f"bag {out.id!r} has {out.dim} features; expected {n_features}")
    return out


def check_bags(X, y=None, n_features=None):
    """Validate a bag sequence (and labels); returns ``(bags, labels)``."""
    if isinstance(X, (Bag, np.ndarray)) or not hasattr(X, "__len__"):
        raise InputError("X must be a sequence of bags")
    if len(X) == 0:
        raise InputError("X contains no bags")
    labels = None
    if y is not None:
        labels = np.asarray(y)
        if labels.shape != (len(X),):
            raise InputError(f"y has shape {labels.shape}; expected ({len(X)},)")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise InputError("labels must be integer class indices")
            labels = labels.astype(np.int64)
        if labels.min() < 0:
            raise InputError("labels must be non-negative")
    bags = []
    for i, item in enumerate(X):
        label = int(labels[i]) if labels is not None else getattr(item, "label", 0)
        bag = check_bag(item, n_features, label=label, bag_id=getattr(item, "id", "") or f"x{i}")
        if labels is not None and bag.label != label:
            bag = Bag(bag.features, bag.coords, label, bag.id, bag.lesion_mask)
        bags.append(bag)
    if n_features is None:
        dims = {b.dim for b in bags}
        if len(dims) != 1:
            raise InputError(f"bags disagree on feature dimension: {sorted(dims)}")
    ids = [b.id for b in bags]
    if len(set(ids)) != len(ids):
        bags = [Bag(b.features, b.coords, b.label, f"x{i}", b.lesion_mask)
                for i, b in enumerate(bags)]
    return bags, labels


class DAGClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Deformable attention graph classifier for bags of patches.

    ``fit`` holds out ``validation_fraction`` of the bags (stratified) for
    early stopping.  ``transform`` returns the pooled slide embedding.
    """

    def __init__(self, k=8, stride=256.0, readout="mean", hidden=None, offset=True,
                 weight=True, coords=True, lr=1e-3, weight_decay=1e-5, epochs=70,
                 patience=30, validation_fraction=2 / 9, random_state=0):
        self.k = k
        self.stride = stride
        self.readout = readout
        self.hidden = hidden
        self.offset = offset
        self.weight = weight
        self.coords = coords
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _dag_config(self, dim, n_classes):
        return DagConfig(dim=dim, n_classes=n_classes, k=self.k, stride=self.stride,
                         readout=self.readout, hidden=self.hidden, offset_on=self.offset,
                         weight_on=self.weight, coords_on=self.coords)

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim != 1:
            raise InputError(f"y must be one-dimensional, got shape {y.shape}")
        classes = unique_labels(y)
        if classes.size < 2:
            raise InputError("need at least two classes to fit")
        bags, _ = check_bags(X, np.searchsorted(classes, y))
        self.classes_ = classes
        self.n_features_in_ = bags[0].dim
        seed = 0 if self.random_state is None else int(self.random_state)
        frac = float(self.validation_fraction)
        split = split_stratified([(b.id, b.label) for b in bags],
                                 ratios=(1 - frac, frac, 0.0), seed=seed, min_per_class=2)
        self.model_ = DagModel(self._dag_config(self.n_features_in_, self.classes_.size), seed=seed)
        cfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                          patience=self.patience, seeds=(seed,))
        _, self.history_ = train(bags, split, self.model_, cfg, seed=seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def _forward_all(self, X):
        self._check_fitted()
        bags, _ = check_bags(X, n_features=self.n_features_in_)
        return [forward_bag(b, self.model_) for b in bags]

    def predict_proba(self, X):
        return np.stack([out.probabilities() for out in self._forward_all(X)])

    def predict(self, X):
        self._check_fitted()
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def decision_function(self, X):
        return np.stack([out.logits.data.reshape(-1).astype(np.float64)
                         for out in self._forward_all(X)])

    def transform(self, X):
        return np.stack([out.embedding.data.reshape(-1).astype(np.float64)
                         for out in self._forward_all(X)])

    def heatmap(self, bag):
        """Per-patch ``(x, y, score)`` rows with scores in [0, 1]."""
        self._check_fitted()
        return attention_heatmap(check_bag(bag, self.n_features_in_), self.model_)
