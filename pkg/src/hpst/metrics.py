"""Hit-level AUC, matched segmentation accuracy and prong purity/efficiency."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput
from .events import CLASS_NAMES
from .loss import linear_sum_assignment

N_BINS = 20


@dataclass(frozen=True)
class ProngScore:
    event_id: int
    true_id: int
    class_id: int
    efficiency: float
    purity: float
    n_hits: int


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInput("AUC needs both positives and negatives")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ovr_auc(class_scores, true_classes, n_classes: int | None = None):
    """One-vs-rest AUC per class and their unweighted mean.

    Returns ``(per_class, macro)`` where ``per_class[c]`` is ``None`` for a
    class without positives or without negatives.
    """
    scores = np.asarray(class_scores, dtype=np.float64)
    y = np.asarray(true_classes, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(y):
        raise ValueError("scores must be (n_hits, C) aligned with labels")
    if len(y) < 2:
        raise DegenerateInput("need at least 2 hits")
    if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("score rows must be probability vectors")
    n_classes = scores.shape[1] if n_classes is None else n_classes
    per_class: list = []
    for c in range(n_classes):
        pos = y == c
        if pos.all() or not pos.any():
            per_class.append(None)
        else:
            per_class.append(binary_auc(scores[:, c], pos))
    present = [a for a in per_class if a is not None]
    macro = float(np.mean(present)) if present else float("nan")
    return per_class, macro


def _overlap(pred, true):
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth must have the same hit count")
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    t_ids, t_inv = np.unique(true, return_inverse=True)
    m = np.zeros((len(p_ids), len(t_ids)), dtype=np.int64)
    np.add.at(m, (p_inv.reshape(-1), t_inv.reshape(-1)), 1)
    return m, p_ids, t_ids


def matched_agreement(ins_pred, ins_true) -> int:
    """Hits agreeing under the best one-to-one slot/instance matching."""
    if len(ins_true) == 0:
        return 0
    m, _, _ = _overlap(ins_pred, ins_true)
    n = max(m.shape)
    cost = np.zeros((n, n))
    cost[: m.shape[0], : m.shape[1]] = -m
    assignment, total = linear_sum_assignment(cost)
    return int(round(-total))


def segmentation_accuracy(ins_pred, ins_true) -> float:
    """Fraction of hits whose predicted slot maps to their true instance.

    ``ins_pred``/``ins_true`` are either flat arrays for one event or
    lists of per-event arrays, in which case the result is the
    hit-weighted mean over events.
    """
    if len(ins_true) and np.ndim(ins_true[0]) > 0:
        agree = sum(matched_agreement(p, t) for p, t in zip(ins_pred, ins_true))
        total = sum(len(t) for t in ins_true)
    else:
        agree = matched_agreement(ins_pred, ins_true)
        total = len(ins_true)
    return agree / total if total else float("nan")


def prong_purity_efficiency(ins_pred, ins_true, sem_true=None, event_id: int = 0) -> list[ProngScore]:
    """Score every true prong against the predicted prongs assigned to it.

    Each predicted prong goes to the true prong it overlaps most (ties to
    the lower true id); several predicted prongs may share one true prong.
    """
    pred = np.asarray(ins_pred, dtype=np.int64)
    true = np.asarray(ins_true, dtype=np.int64)
    if len(true) == 0:
        return []
    m, p_ids, t_ids = _overlap(pred, true)
    owner = np.argmax(m, axis=1)  # first max -> lower true id
    out = []
    for ti, t in enumerate(t_ids):
        members = true == t
        assigned = p_ids[owner == ti]
        covered = np.isin(pred, assigned)
        inter = int((covered & members).sum())
        size = int(members.sum())
        union = int(covered.sum())
        eff = inter / size
        pur = inter / union if union else 0.0
        if sem_true is None:
            cls = -1
        else:
            vals, cnt = np.unique(np.asarray(sem_true)[members], return_counts=True)
            cls = int(vals[np.argmax(cnt)])
        out.append(ProngScore(int(event_id), int(t), cls, eff, pur, size))
    return out


@dataclass
class EvalReport:
    per_class_auc: list
    macro_auc: float
    segmentation_accuracy: float
    efficiency_hist: dict          # class name -> 20 counts over [0, 1]
    purity_hist: dict
    n_events: int
    n_hits: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_events": self.n_events,
            "n_hits": self.n_hits,
            "macro_auc": self.macro_auc,
            "per_class_auc": {CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): a for c, a in enumerate(self.per_class_auc)},
            "segmentation_accuracy": self.segmentation_accuracy,
            "efficiency_hist": self.efficiency_hist,
            "purity_hist": self.purity_hist,
            "config": self.config,
        }


def histogram(values, n_bins: int = N_BINS) -> list[int]:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=n_bins, range=(0.0, 1.0))
    return [int(c) for c in counts]


def build_report(sem_probs, sem_true, ins_pred, ins_true, event_ids, n_classes: int, config=None) -> EvalReport:
    """Aggregate per-event predictions into an :class:`EvalReport`.

    All arguments except ``n_classes``/``config`` are per-event lists of
    flat per-hit arrays (both views concatenated).
    """
    probs = np.concatenate([np.asarray(p).reshape(-1, n_classes) for p in sem_probs]) if sem_probs else np.zeros((0, n_classes))
    y = np.concatenate([np.asarray(s).reshape(-1) for s in sem_true]) if sem_true else np.zeros(0, np.int64)
    per_class, macro = ovr_auc(probs, y, n_classes)
    acc = segmentation_accuracy(list(ins_pred), list(ins_true))
    eff = {CLASS_NAMES[c]: [] for c in range(n_classes)}
    pur = {CLASS_NAMES[c]: [] for c in range(n_classes)}
    for p, t, s, eid in zip(ins_pred, ins_true, sem_true, event_ids):
        for score in prong_purity_efficiency(p, t, s, eid):
            name = CLASS_NAMES[score.class_id]
            eff[name].append(score.efficiency)
            pur[name].append(score.purity)
    return EvalReport(
        per_class_auc=per_class,
        macro_auc=macro,
        segmentation_accuracy=acc,
        efficiency_hist={k: histogram(v) for k, v in eff.items()},
        purity_hist={k: histogram(v) for k, v in pur.items()},
        n_events=len(event_ids),
        n_hits=int(len(y)),
        config=dict(config or {}),
    )
