"""scikit-learn style wrapper around the two-view segmentation network.

Samples are :class:`~hpst.events.Event` objects; the labels live inside
them, so ``fit`` ignores ``y``.  Predictions come back per event, with
both views concatenated (view 0 first).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import MalformedRecord
from .events import Event, validate_event
from .metrics import ovr_auc, segmentation_accuracy
from .model import HyperParams, predict
from .trainer import TrainConfig, fit_events


def check_events(X, n_classes: int, p_max: int, labelled: bool = True) -> list[Event]:
    """Validate a sequence of events and return it as a list.

    With ``labelled=False`` only geometry and values are checked, so
    events with placeholder labels are accepted for inference.
    """
    if isinstance(X, Event):
        raise TypeError("expected a sequence of events, got a single Event")
    try:
        events = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of events, got {type(X).__name__}") from None
    label_kinds = {"LabelOutOfRange", "NonContiguousInstances"}
    for i, ev in enumerate(events):
        if not isinstance(ev, Event):
            raise TypeError(f"item {i} is {type(ev).__name__}, not Event")
        bad = [v for v in validate_event(ev, n_classes, p_max) if labelled or v.kind not in label_kinds]
        if bad:
            raise MalformedRecord(i, f"event {ev.event_id}: {bad[0].kind} at {bad[0].location}")
    return events


class HPSTSegmenter(BaseEstimator):
    """Semantic and instance segmentation of two-view hit events.

    Parameters mirror :class:`~hpst.model.HyperParams` and
    :class:`~hpst.trainer.TrainConfig`.

    Examples
    --------
    >>> from hpst.synthgen import GenConfig, generate_events
    >>> events = generate_events(4, GenConfig(seed=1))
    >>> est = HPSTSegmenter(base_dim=4, k_nn=2, epochs=1).fit(events)
    >>> len(est.predict(events)) == 4
    True
    """

    def __init__(self, n=2, m=1, base_dim=32, k_nn=8, base_voxel_size=2.0, n_classes=6,
                 instance_slots=8, inter_view=True, epochs=8, lr=1e-3, lam=0.5, batch_size=16,
                 seed=0, patience=0, validation="hash"):
        self.n = n
        self.m = m
        self.base_dim = base_dim
        self.k_nn = k_nn
        self.base_voxel_size = base_voxel_size
        self.n_classes = n_classes
        self.instance_slots = instance_slots
        self.inter_view = inter_view
        self.epochs = epochs
        self.lr = lr
        self.lam = lam
        self.batch_size = batch_size
        self.seed = seed
        self.patience = patience
        self.validation = validation

    def _hyper(self) -> HyperParams:
        return HyperParams(n=self.n, m=self.m, base_dim=self.base_dim, k_nn=self.k_nn,
                           base_voxel_size=self.base_voxel_size, n_classes=self.n_classes,
                           instance_slots=self.instance_slots, inter_view=self.inter_view)

    def fit(self, X: Sequence[Event], y=None):
        """Train on labelled events.

        ``validation="hash"`` holds out ~10% of events by id hash and keeps
        the best-AUC epoch; ``"none"`` trains on everything and keeps the
        last epoch.
        """
        if self.validation not in ("hash", "none"):
            raise ValueError("validation must be 'hash' or 'none'")
        hyper = self._hyper()
        events = check_events(X, hyper.n_classes, hyper.instance_slots)
        if not events:
            raise ValueError("fit needs at least one event")
        config = TrainConfig(epochs=self.epochs, lr=self.lr, lam=self.lam, batch_size=self.batch_size,
                             seed=self.seed, patience=self.patience, hyper=hyper)
        result = fit_events(events, config, val_events=[] if self.validation == "none" else None)
        self.weights_ = result.weights
        self.hyper_ = hyper
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _predict_all(self, X):
        check_is_fitted(self, "weights_")
        events = check_events(X, self.hyper_.n_classes, self.hyper_.instance_slots, labelled=False)
        return [predict(ev, self.weights_, self.hyper_) for ev in events]

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per event, an ``(n_hits, n_classes)`` array of class probabilities."""
        return [p for p, _ in self._predict_all(X)]

    def predict(self, X) -> list[np.ndarray]:
        """Per event, the most probable class of each hit."""
        return [np.argmax(p, axis=1) if len(p) else np.zeros(0, np.int64) for p in self.predict_proba(X)]

    def predict_instances(self, X) -> list[np.ndarray]:
        """Per event, the instance slot of each hit."""
        return [s for _, s in self._predict_all(X)]

    def score(self, X, y=None) -> float:
        """Hit-level macro one-vs-rest AUC over all events."""
        preds = self._predict_all(X)
        probs = np.concatenate([p for p, _ in preds])
        truth = np.concatenate([np.concatenate([v.sem for v in ev.views]) for ev in X])
        return ovr_auc(probs, truth, self.hyper_.n_classes)[1]

    def segmentation_score(self, X) -> float:
        """Hit-weighted matched instance accuracy over all events."""
        slots = self.predict_instances(X)
        truth = [np.concatenate([v.ins for v in ev.views]) for ev in X]
        return segmentation_accuracy(slots, truth)
