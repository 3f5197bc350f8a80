"""Inference benchmark, sparse/dense memory model, evaluation runs and SVG displays."""

from __future__ import annotations

import json
import math
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigMismatch
from .events import CLASS_NAMES, GRID_SHAPE, Event, read_dataset
from .metrics import EvalReport, build_report, N_BINS
from .model import HyperParams, predict
from .trainer import load_checkpoint

BYTES_PER_FLOAT = 8
SPARSE_BYTES_PER_HIT = (2 + 1) * BYTES_PER_FLOAT   # two coordinates and one value
DENSE_BYTES = 2 * GRID_SHAPE[0] * GRID_SHAPE[1] * BYTES_PER_FLOAT


def sparse_bytes(n_hits: int) -> int:
    """Bytes to store ``n_hits`` hits as f64 (coords, value) rows."""
    return int(n_hits) * SPARSE_BYTES_PER_HIT


def dense_bytes() -> int:
    """Bytes of the two-view f64 image."""
    return DENSE_BYTES


def crossover_hits() -> int:
    """Smallest hit count whose sparse storage is at least the dense image."""
    return -(-DENSE_BYTES // SPARSE_BYTES_PER_HIT)


def sparse_dense_ratio(n_hits: float) -> float:
    return n_hits * SPARSE_BYTES_PER_HIT / DENSE_BYTES


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    n_samples: int
    time_mean_s: float
    time_std_s: float
    peak_mem_mib: float
    mean_hits: float
    sparse_bytes_mean: float
    dense_bytes: int
    sparse_dense_ratio: float
    crossover_hits: int
    over_crossover: list        # event ids whose sparse storage exceeds the dense image

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "time_mean_s": self.time_mean_s,
            "time_std_s": self.time_std_s,
            "peak_mem_mib": self.peak_mem_mib,
            "mean_hits": self.mean_hits,
            "sparse_bytes_mean": self.sparse_bytes_mean,
            "dense_bytes": self.dense_bytes,
            "sparse_dense_ratio": self.sparse_dense_ratio,
            "crossover_hits": self.crossover_hits,
            "over_crossover": self.over_crossover,
        }


def bench_inference(weights: dict, hyper: HyperParams, events: Sequence[Event], n_samples: int = 100) -> BenchReport:
    """Time single-event inference and measure its peak extra allocation.

    Timing and memory use separate passes so the allocation tracer does
    not inflate the wall times.  Each pass starts with one warm-up event.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sample = list(events[:n_samples])
    if not sample:
        raise ValueError("no events to benchmark")
    predict(sample[0], weights, hyper)
    times = []
    for ev in sample:
        t0 = time.perf_counter()
        predict(ev, weights, hyper)
        times.append(time.perf_counter() - t0)
    peak = 0
    tracemalloc.start()
    try:
        for ev in sample:
            tracemalloc.reset_peak()
            base, _ = tracemalloc.get_traced_memory()
            predict(ev, weights, hyper)
            _, top = tracemalloc.get_traced_memory()
            peak = max(peak, top - base)
    finally:
        tracemalloc.stop()
    hits = np.array([ev.n_hits for ev in sample], dtype=np.float64)
    return BenchReport(
        n_samples=len(sample),
        time_mean_s=float(np.mean(times)),
        time_std_s=float(np.std(times)),
        peak_mem_mib=peak / 2**20,
        mean_hits=float(hits.mean()),
        sparse_bytes_mean=float(hits.mean() * SPARSE_BYTES_PER_HIT),
        dense_bytes=DENSE_BYTES,
        sparse_dense_ratio=sparse_dense_ratio(hits.mean()),
        crossover_hits=crossover_hits(),
        over_crossover=[ev.event_id for ev in sample if sparse_bytes(ev.n_hits) > DENSE_BYTES],
    )


# ---------------------------------------------------------------------------
# evaluation


def _clean(obj):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps_report(d: dict) -> str:
    return json.dumps(_clean(d), indent=2) + "\n"


def evaluate_predictor(events: Sequence[Event], predict_fn: Callable, n_classes: int, config=None) -> EvalReport:
    """Score any ``event -> (probs (N, C), slots (N,))`` predictor."""
    probs, sem_true, ins_pred, ins_true, ids = [], [], [], [], []
    for ev in events:
        p, s = predict_fn(ev)
        if len(p) != ev.n_hits or len(s) != ev.n_hits:
            raise ValueError(f"event {ev.event_id}: predictions do not align with hits")
        probs.append(np.asarray(p, dtype=np.float64))
        ins_pred.append(np.asarray(s, dtype=np.int64))
        sem_true.append(np.concatenate([v.sem for v in ev.views]))
        ins_true.append(np.concatenate([v.ins for v in ev.views]))
        ids.append(ev.event_id)
    return build_report(probs, sem_true, ins_pred, ins_true, ids, n_classes, config)


def histogram_tsv(report: EvalReport) -> str:
    """Per-class efficiency and purity histograms as tab-separated columns."""
    lines = ["class\tmetric\tbin_lo\tbin_hi\tcount"]
    for metric, hists in (("efficiency", report.efficiency_hist), ("purity", report.purity_hist)):
        for cls, counts in hists.items():
            for b, c in enumerate(counts):
                lines.append(f"{cls}\t{metric}\t{b / N_BINS:.2f}\t{(b + 1) / N_BINS:.2f}\t{c}")
    return "\n".join(lines) + "\n"


def load_compatible(ckpt_path, data_path):
    """Checkpoint and dataset, checked against each other."""
    weights, hyper = load_checkpoint(ckpt_path)
    header, events = read_dataset(data_path)
    if header.n_classes != hyper.n_classes or header.p_max > hyper.instance_slots:
        raise ConfigMismatch(
            f"dataset (C={header.n_classes}, p_max={header.p_max}) does not fit the checkpoint "
            f"(C={hyper.n_classes}, slots={hyper.instance_slots})"
        )
    return weights, hyper, events


def run_eval(ckpt_path, data_path, out_path) -> EvalReport:
    """Write the JSON report to ``out_path`` and histograms to ``<out>.hist.tsv``."""
    weights, hyper, events = load_compatible(ckpt_path, data_path)
    report = evaluate_predictor(
        events, lambda ev: predict(ev, weights, hyper), hyper.n_classes,
        {"checkpoint": Path(ckpt_path).name, "dataset": Path(data_path).name, "hyper": hyper.to_dict()},
    )
    out_path = Path(out_path)
    out_path.write_text(dumps_report(report.to_dict()), encoding="utf-8")
    out_path.with_name(out_path.name + ".hist.tsv").write_text(histogram_tsv(report), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# event display

DEFAULT_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f")
CELL = 6          # pixels per grid unit
MARGIN = 30
LEGEND_H = 30


@dataclass(frozen=True)
class DisplaySpec:
    event_id: int
    panels: str = "both"          # "true", "pred" or "both"
    colors: tuple = DEFAULT_COLORS
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        if self.panels not in ("true", "pred", "both"):
            raise ValueError("panels must be 'true', 'pred' or 'both'")
        if len(self.colors) < len(self.class_names):
            raise ValueError("color map must cover every class")


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def render_event_display(event: Event, predicted=None, spec: Optional[DisplaySpec] = None) -> str:
    """Two panels per row (XZ, YZ); a truth row and, with predictions, a predicted row.

    ``predicted`` is a per-view pair of class-id arrays, or one flat
    array over both views (view 0 first).
    """
    spec = spec or DisplaySpec(event.event_id)
    rows = []
    if spec.panels in ("true", "both"):
        rows.append(("true", [v.sem for v in event.views]))
    if predicted is not None and spec.panels in ("pred", "both"):
        if len(predicted) == 2 and np.ndim(predicted[0]) == 1 and len(predicted[0]) == len(event.views[0]):
            per_view = [np.asarray(p) for p in predicted]
        else:
            flat = np.asarray(predicted)
            n0 = len(event.views[0])
            per_view = [flat[:n0], flat[n0:]]
        for v, p in zip(event.views, per_view):
            if len(p) != len(v):
                raise ValueError("predictions do not align with the event's hits")
        rows.append(("predicted", per_view))
    n_trans, n_planes = GRID_SHAPE
    pw, ph = n_planes * CELL, n_trans * CELL
    width = 2 * pw + 3 * MARGIN
    height = len(rows) * (ph + MARGIN) + MARGIN + LEGEND_H
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<title>event {event.event_id}</title>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r, (label, classes) in enumerate(rows):
        y0 = MARGIN + r * (ph + MARGIN)
        for j, view in enumerate(event.views):
            x0 = MARGIN + j * (pw + MARGIN)
            name = "XZ" if j == 0 else "YZ"
            out.append(f'<g class="panel" id="{label}-{name}">')
            out.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
            out.append(f'<text x="{x0}" y="{y0 - 6}">{label} {name}</text>')
            for (t, z), c in zip(view.coords, classes[j]):
                color = spec.colors[int(c)]
                out.append(
                    f'<rect class="hit" x="{_num(x0 + z * CELL)}" y="{_num(y0 + t * CELL)}" '
                    f'width="{CELL}" height="{CELL}" fill="{color}"/>'
                )
            out.append("</g>")
    ly = height - LEGEND_H + 10
    out.append('<g class="legend">')
    for c, name in enumerate(spec.class_names):
        lx = MARGIN + c * 90
        out.append(f'<rect x="{lx}" y="{ly}" width="10" height="10" fill="{spec.colors[c]}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly + 9}">{name}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
