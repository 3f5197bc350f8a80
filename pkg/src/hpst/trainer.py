"""Optimisation loop, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .errors import ConfigMismatch, CorruptCheckpoint, NonFiniteError, NonFiniteLoss, ShapeMismatch
from .events import Event, read_dataset
from .loss import event_loss
from .metrics import ovr_auc, segmentation_accuracy
from .model import (
    HyperParams,
    Structure,
    check_weights,
    event_inputs,
    event_structure,
    forward_structured,
    init_weights,
    softmax_rows,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HPST"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    lr: float = 1e-3
    lam: float = 0.5
    batch_size: int = 16
    seed: int = 0
    patience: int = 0          # epochs without improvement before stopping; 0 = never
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.batch_size < 1 or self.patience < 0:
            raise ValueError("batch_size must be >= 1 and patience >= 0")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, weights: dict) -> "OptimizerState":
        return cls({k: np.zeros(_arr(w).shape) for k, w in weights.items()},
                   {k: np.zeros(_arr(w).shape) for k, w in weights.items()})


def _arr(x):
    return x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)


def adam_step(weights: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, parameters visited in sorted path order.

    ``weights``/``grads`` map paths to arrays (or tensors).  Returns new
    ``(weights, state)``; the inputs are left untouched.
    """
    step = state.step + 1
    new_w, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for path in sorted(weights):
        w = _arr(weights[path])
        g = _arr(grads[path]) if path in grads and grads[path] is not None else np.zeros(w.shape)
        if g.shape != w.shape or state.m[path].shape != w.shape:
            raise ShapeMismatch(f"adam_step: shape mismatch at {path}")
        m = beta1 * state.m[path] + (1.0 - beta1) * g
        v = beta2 * state.v[path] + (1.0 - beta2) * g * g
        new_w[path] = w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[path] = m
        new_v[path] = v
    return new_w, OptimizerState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# per-event gradients


def event_gradients(event: Event, weights: dict, hyper: HyperParams, lam: float,
                    structure: Optional[Structure] = None, use_inter=None):
    """Loss breakdown and a ``path -> gradient`` dict for one event."""
    if structure is None:
        structure = event_structure(event, hyper)
    for t in weights.values():
        t.grad = None
    try:
        with dc.Tape() as tape:
            sem, ins = forward_structured(event_inputs(event), structure, weights, hyper, use_inter)
            lb = event_loss(sem, ins, event, lam)
    except NonFiniteError:
        raise NonFiniteLoss(event.event_id, "nan") from None
    if not np.isfinite(lb.total):
        raise NonFiniteLoss(event.event_id, lb.total)
    tape.backward(lb.tensor)
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in weights.items()}
    return lb, grads


def is_validation(event_id: int) -> bool:
    """Deterministic ~10% hold-out keyed on a hash of the event id."""
    z = (int(event_id) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    return z % 10 == 0


def evaluate_events(events: Sequence[Event], weights: dict, hyper: HyperParams, lam: float,
                    structures: Optional[dict] = None) -> dict:
    """Mean losses, macro AUC and segmentation accuracy, without gradients."""
    probs, sem_true, ins_pred, ins_true = [], [], [], []
    sums = np.zeros(3)
    for ev in events:
        st = structures.get(ev.event_id) if structures is not None else None
        if st is None:
            st = event_structure(ev, hyper)
            if structures is not None:
                structures[ev.event_id] = st
        sem, ins = forward_structured(event_inputs(ev), st, weights, hyper)
        lb = event_loss(sem, ins, ev, lam)
        sums += (lb.sem, lb.ins, lb.total)
        probs.append(softmax_rows(sem.data) if sem.shape[0] else np.zeros((0, hyper.n_classes)))
        sem_true.append(np.concatenate([v.sem for v in ev.views]))
        ins_pred.append(np.argmax(ins.data, axis=1) if ins.shape[0] else np.zeros(0, np.int64))
        ins_true.append(np.concatenate([v.ins for v in ev.views]))
    out = {"loss_sem": 0.0, "loss_ins": 0.0, "loss_total": 0.0, "macro_auc": float("nan"), "seg_acc": float("nan")}
    if not events:
        return out
    out["loss_sem"], out["loss_ins"], out["loss_total"] = (sums / len(events)).tolist()
    y = np.concatenate(sem_true)
    if len(y) >= 2:
        _, out["macro_auc"] = ovr_auc(np.concatenate(probs), y, hyper.n_classes)
    out["seg_acc"] = segmentation_accuracy(ins_pred, ins_true)
    return out


@dataclass
class TrainResult:
    weights: dict
    history: list
    best_epoch: int


def fit_events(events: Sequence[Event], config: TrainConfig, log_fn: Optional[Callable[[dict], None]] = None,
               val_events: Optional[Sequence[Event]] = None) -> TrainResult:
    """Train on ``events`` and return the best-validation weights.

    Unless ``val_events`` is given, ~10% of ``events`` (chosen by id
    hash) are held out for validation.  Model selection uses validation
    macro AUC; with no validation events the last epoch wins.
    """
    hyper = config.hyper
    if val_events is None:
        train = [e for e in events if not is_validation(e.event_id)]
        val = [e for e in events if is_validation(e.event_id)]
    else:
        train, val = list(events), list(val_events)
    if not train:
        raise ValueError("no training events")
    weights = init_weights(hyper, config.seed)
    state = OptimizerState.zeros_like(weights)
    structures: dict = {}
    order_ids = np.array([e.event_id for e in train])
    history = []
    best_score, best_epoch, best_weights = -np.inf, -1, None
    stale = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        sums = np.zeros(3)
        for start in range(0, len(perm), config.batch_size):
            batch = sorted(perm[start : start + config.batch_size], key=lambda i: order_ids[i])
            acc = None
            for i in batch:
                ev = train[i]
                st = structures.get(ev.event_id)
                if st is None:
                    st = structures[ev.event_id] = event_structure(ev, hyper)
                lb, grads = event_gradients(ev, weights, hyper, config.lam, st)
                sums += (lb.sem, lb.ins, lb.total)
                if acc is None:
                    acc = grads
                else:
                    acc = {k: acc[k] + grads[k] for k in acc}
            acc = {k: g / len(batch) for k, g in acc.items()}
            new_w, state = adam_step(weights, acc, state, config.lr)
            for k, arr in new_w.items():
                weights[k].data = arr
        row = {
            "epoch": epoch + 1,
            "train_loss_sem": sums[0] / len(train),
            "train_loss_ins": sums[1] / len(train),
            "train_loss_total": sums[2] / len(train),
        }
        if val:
            metrics = evaluate_events(val, weights, hyper, config.lam, structures)
            row.update({f"val_{k}": v for k, v in metrics.items()})
            score = metrics["macro_auc"]
            score = -np.inf if not np.isfinite(score) else score
        else:
            score = float(epoch)
        if score > best_score or best_weights is None:
            best_score, best_epoch, stale = score, epoch + 1, 0
            best_weights = {k: t.data.copy() for k, t in weights.items()}
        else:
            stale += 1
        history.append(row)
        log.info("epoch %d %s", epoch + 1, row)
        if log_fn is not None:
            log_fn(row)
        if config.patience and stale >= config.patience:
            break
    final = {k: dc.Tensor(arr, requires_grad=True) for k, arr in best_weights.items()}
    return TrainResult(final, history, best_epoch)


def train(dataset_path, config: TrainConfig, out_path, log_path=None) -> Path:
    """Train from an event file, write the best checkpoint and a JSON-lines log."""
    header, events = read_dataset(dataset_path)
    hyper = config.hyper
    if header.n_classes != hyper.n_classes:
        raise ConfigMismatch(f"dataset has {header.n_classes} classes, model expects {hyper.n_classes}")
    if header.p_max > hyper.instance_slots:
        raise ConfigMismatch(f"dataset allows {header.p_max} instances, model has {hyper.instance_slots} slots")
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path is not None else out_path.with_name(out_path.name + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:

        def write_row(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        result = fit_events(events, config, write_row)
    save_checkpoint(result.weights, hyper, out_path)
    return out_path


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian:  "HPST" u32 version | u32 n_hyper, (u16 len, utf8 key, f64)*
#                 | u32 n_tensors, (u16 len, utf8 name, u8 rank, u32 dim*, f64 data*)*


def save_checkpoint(weights: dict, hyper: HyperParams, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    hd = hyper.to_dict()
    parts.append(struct.pack("<I", len(hd)))
    for key, val in hd.items():
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<d", val))
    parts.append(struct.pack("<I", len(weights)))
    for name, t in weights.items():
        arr = np.ascontiguousarray(_arr(t), dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: Optional[HyperParams] = None):
    """Read ``(weights, hyper)``; nothing is returned unless the whole file checks out."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    hd = {}
    (n_hyper,) = r.unpack("<I")
    for _ in range(n_hyper):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (hd[key],) = r.unpack("<d")
    try:
        hyper = HyperParams.from_dict(hd)
    except (ValueError, ConfigMismatch) as exc:
        raise CorruptCheckpoint(f"bad hyperparameter block: {exc}") from None
    weights = {}
    (n_tensors,) = r.unpack("<I")
    for _ in range(n_tensors):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        weights[name] = dc.Tensor(data, requires_grad=True)
    if r.pos != len(r.buf):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    try:
        check_weights(weights, hyper)
    except ConfigMismatch as exc:
        raise CorruptCheckpoint(str(exc)) from None
    if expected is not None and expected != hyper:
        raise ConfigMismatch(f"checkpoint hyperparameters {hyper} differ from expected {expected}")
    return weights, hyper

