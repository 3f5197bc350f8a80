"""Training objective: semantic cross-entropy plus permutation-matched instance cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import LabelOutOfRange, NonFiniteCost, TooManyInstances

DEFAULT_LAMBDA = 0.5


# ---------------------------------------------------------------------------
# linear sum assignment


def _shortest_augmenting_path(c: np.ndarray):
    """O(n^3) Hungarian method with row/column potentials.

    Returns ``(row_to_col, u, v)`` where ``u_i + v_j <= c_ij`` everywhere
    and equality holds on the matching.
    """
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)    # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexmin_perfect_matching(tight: np.ndarray, row_to_col: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the ``tight`` edge set.

    Starts from a known perfect matching and, row by row, moves each row
    to the smallest column it can take while the unfixed rows can still
    be matched (checked with one alternating-path search per attempt).
    """
    n = len(row_to_col)
    match = row_to_col.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)

    def find_path(row, target, reserved, blocked, seen):
        # alternating path from `row` ending at free column `target`
        for col in np.nonzero(tight[row])[0]:
            if col == reserved or seen[col]:
                continue
            if col == target:
                return [(row, col)]
            r2 = owner[col]
            if blocked[r2]:
                continue
            seen[col] = True
            rest = find_path(r2, target, reserved, blocked, seen)
            if rest is not None:
                return [(row, col)] + rest
        return None

    for i in range(n):
        for j in np.nonzero(tight[i])[0]:
            if j >= match[i]:
                break
            r = owner[j]
            if fixed[r]:
                continue
            blocked = fixed.copy()
            blocked[i] = True
            seen = np.zeros(n, dtype=bool)
            seen[j] = True
            path = find_path(r, match[i], j, blocked, seen)
            if path is None:
                continue
            for row, col in path:
                match[row] = col
                owner[col] = row
            match[i] = j
            owner[j] = i
            break
        fixed[i] = True
    return match


def linear_sum_assignment(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching of a square cost matrix.

    Returns ``(assignment, total)`` with ``assignment[row] = col``.  Among
    optimal matchings the lexicographically smallest assignment vector is
    returned, so ties resolve deterministically.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got {c.shape}")
    if not np.isfinite(c).all():
        raise NonFiniteCost("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    # shift to a non-negative matrix; doesn't change the argmin
    shifted = c - c.min()
    row_to_col, u, v = _shortest_augmenting_path(shifted)
    scale = max(1.0, float(np.abs(shifted).max()))
    tight = np.abs(shifted - u[:, None] - v[None, :]) <= 1e-12 * scale * n
    assignment = _lexmin_perfect_matching(tight, row_to_col)
    total = float(sum(c[i, assignment[i]] for i in range(n)))
    return assignment, total


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    sem: float
    ins: float
    total: float
    lam: float
    matching: dict = field(default_factory=dict)   # instance slot -> true instance id
    tensor: Tensor | None = None                   # differentiable total


def _stack(per_view):
    if isinstance(per_view, Tensor):
        return per_view
    return dc.concat(list(per_view), axis=0)


def _labels(per_view) -> np.ndarray:
    if isinstance(per_view, np.ndarray):
        return per_view.astype(np.int64)
    parts = [np.asarray(a, dtype=np.int64).reshape(-1) for a in per_view]
    return np.concatenate(parts) if parts else np.zeros(0, np.int64)


def semantic_loss(sem_logits, sem_labels) -> Tensor:
    """Mean per-hit cross-entropy over both views."""
    logits = _stack(sem_logits)
    y = _labels(sem_labels)
    if y.shape != (logits.shape[0],):
        raise ValueError("label count does not match logit rows")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise LabelOutOfRange("semantic label outside [0, C)")
    return dc.cross_entropy(logits, y)


def instance_cost_matrix(log_probs: np.ndarray, labels: np.ndarray):
    """``cost[s, p]`` = summed ``-log p(slot s)`` over the hits of true instance ``p``.

    Columns beyond the instances present are zero (dummy) so the matrix is
    square ``S x S``.  Also returns the sorted list of present instance ids
    that the real columns correspond to.
    """
    n_slots = log_probs.shape[1]
    present = np.unique(labels)
    if len(present) > n_slots:
        raise TooManyInstances(f"{len(present)} instances but only {n_slots} slots")
    cost = np.zeros((n_slots, n_slots))
    for col, p in enumerate(present):
        cost[:, col] = -log_probs[labels == p].sum(axis=0)
    return cost, present


def instance_loss(ins_logits, ins_labels) -> tuple[Tensor, dict]:
    """Cross-entropy against the best slot permutation of the true instance ids.

    One joint matching per event over both views.  The matching is a
    constant for the backward pass.  Returns ``(loss, {slot: instance})``.
    """
    logits = _stack(ins_logits)
    y = _labels(ins_labels)
    if y.shape != (logits.shape[0],):
        raise ValueError("label count does not match logit rows")
    if y.size and y.min() < 0:
        raise LabelOutOfRange("negative instance label")
    logp = dc.log_softmax(logits)
    if y.size == 0:
        return dc.scale(dc.pick_mean(logp, y), -1.0), {}
    cost, present = instance_cost_matrix(logp.data, y)
    assignment, _ = linear_sum_assignment(cost)
    slot_of = {}
    matching = {}
    for slot, col in enumerate(assignment):
        if col < len(present):
            slot_of[int(present[col])] = slot
            matching[slot] = int(present[col])
    target = np.array([slot_of[int(p)] for p in y], dtype=np.int64)
    return dc.scale(dc.pick_mean(logp, target), -1.0), matching


def total_loss(sem: Tensor, ins: Tensor, lam: float = DEFAULT_LAMBDA, matching=None) -> LossBreakdown:
    """``lam * sem + (1 - lam) * ins``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    sem = dc.as_tensor(sem)
    ins = dc.as_tensor(ins)
    t = dc.affine_combine(sem, ins, lam, 1.0 - lam)
    return LossBreakdown(float(sem.data), float(ins.data), float(t.data), lam, dict(matching or {}), t)


def event_loss(sem_logits, ins_logits, event, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    sem = semantic_loss(sem_logits, [v.sem for v in event.views])
    ins, matching = instance_loss(ins_logits, [v.ins for v in event.views])
    return total_loss(sem, ins, lam, matching)
