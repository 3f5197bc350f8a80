"""Two-view sparse event representation and its line-oriented file format.

An event is a pair of hit lists, one per detector view (0 = XZ/top,
1 = YZ/side).  Each hit has a ``(transverse, plane)`` coordinate in grid
units, a non-negative deposit value, a semantic class and an instance
(prong) id.  Instance ids are global to the event.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import MalformedRecord, VersionMismatch

FORMAT_VERSION = 1
GRID_SHAPE = (80, 100)  # (transverse cells, planes)
N_VIEWS = 2
N_CLASSES = 6
P_MAX = 8

CLASS_NAMES = ("electron", "muon", "proton", "pion", "photon", "other")
ELECTRON, MUON, PROTON, PION, PHOTON, OTHER = range(6)


class Hit(NamedTuple):
    coord: tuple[float, float]
    value: float
    sem_label: int
    ins_label: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class View:
    """Hits of one view stored column-wise.

    ``coords`` is ``(K, 2)`` float64, the rest are length-``K`` arrays.
    """

    view_id: int
    coords: np.ndarray
    values: np.ndarray
    sem: np.ndarray
    ins: np.ndarray

    def __post_init__(self):
        coords = _frozen(self.coords, np.float64).reshape(-1, 2)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", _frozen(self.values, np.float64).reshape(-1))
        object.__setattr__(self, "sem", _frozen(self.sem, np.int64).reshape(-1))
        object.__setattr__(self, "ins", _frozen(self.ins, np.int64).reshape(-1))
        k = len(coords)
        if not (len(self.values) == len(self.sem) == len(self.ins) == k):
            raise ValueError("view columns have inconsistent lengths")

    @classmethod
    def from_hits(cls, view_id: int, hits: Iterable[Hit]) -> "View":
        hits = list(hits)
        if not hits:
            return cls.empty(view_id)
        return cls(
            view_id,
            [h.coord for h in hits],
            [h.value for h in hits],
            [h.sem_label for h in hits],
            [h.ins_label for h in hits],
        )

    @classmethod
    def empty(cls, view_id: int) -> "View":
        return cls(view_id, np.zeros((0, 2)), [], [], [])

    def __len__(self):
        return len(self.values)

    @property
    def hits(self) -> list[Hit]:
        return [
            Hit((float(c[0]), float(c[1])), float(v), int(s), int(p))
            for c, v, s, p in zip(self.coords, self.values, self.sem, self.ins)
        ]

    def __eq__(self, other):
        if not isinstance(other, View):
            return NotImplemented
        return (
            self.view_id == other.view_id
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.sem, other.sem)
            and np.array_equal(self.ins, other.ins)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Event:
    event_id: int
    views: tuple[View, View]

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))

    @property
    def n_hits(self) -> int:
        return sum(len(v) for v in self.views)

    @property
    def n_instances(self) -> int:
        ids = [v.ins for v in self.views if len(v)]
        if not ids:
            return 0
        return 1 + int(max(a.max() for a in ids))

    def __eq__(self, other):
        if not isinstance(other, Event):
            return NotImplemented
        return self.event_id == other.event_id and self.views == other.views

    __hash__ = None


@dataclass(frozen=True)
class DatasetHeader:
    n_events: int
    n_classes: int = N_CLASSES
    p_max: int = P_MAX
    grid_shape: tuple[int, int] = GRID_SHAPE
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "n_classes": self.n_classes,
                "p_max": self.p_max,
                "grid": list(self.grid_shape),
                "n_events": self.n_events,
            },
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    location: str
    detail: str = ""


# ---------------------------------------------------------------------------
# validation


def validate_event(event: Event, n_classes: int = N_CLASSES, p_max: int = P_MAX) -> list[Violation]:
    """Return one :class:`Violation` per broken invariant; ``[]`` if valid."""
    out: list[Violation] = []
    if len(event.views) != N_VIEWS:
        return [Violation("ViewCount", f"event {event.event_id}", f"{len(event.views)} views")]
    n_t, n_z = GRID_SHAPE
    seen: set[int] = set()
    for j, view in enumerate(event.views):
        loc = f"event {event.event_id} view {j}"
        if view.view_id != j:
            out.append(Violation("BadViewId", loc, f"view_id {view.view_id}"))
        for k in range(len(view)):
            hloc = f"{loc} hit {k}"
            t, z = view.coords[k]
            if not (math.isfinite(t) and math.isfinite(z)):
                out.append(Violation("NonFiniteCoord", hloc))
            elif not (0 <= t < n_t and 0 <= z < n_z):
                out.append(Violation("OutOfGrid", hloc, f"coord ({t}, {z})"))
            v = view.values[k]
            if not math.isfinite(v):
                out.append(Violation("NonFiniteValue", hloc))
            elif v < 0:
                out.append(Violation("NegativeValue", hloc, f"value {v}"))
            s = int(view.sem[k])
            if not 0 <= s < n_classes:
                out.append(Violation("LabelOutOfRange", hloc, f"sem_label {s}"))
            p = int(view.ins[k])
            if not 0 <= p < p_max:
                out.append(Violation("LabelOutOfRange", hloc, f"ins_label {p}"))
            else:
                seen.add(p)
    if seen and seen != set(range(max(seen) + 1)):
        missing = sorted(set(range(max(seen) + 1)) - seen)
        out.append(
            Violation("NonContiguousInstances", f"event {event.event_id}", f"missing ids {missing}")
        )
    return out


# ---------------------------------------------------------------------------
# file format


def _event_to_json(event: Event) -> str:
    views = []
    for view in event.views:
        views.append(
            [
                {"c": [float(c[0]), float(c[1])], "v": float(v), "s": int(s), "p": int(p)}
                for c, v, s, p in zip(view.coords, view.values, view.sem, view.ins)
            ]
        )
    # json uses float.__repr__, the shortest string that round-trips a float64
    return json.dumps({"id": int(event.event_id), "views": views}, separators=(",", ":"))


def _event_from_obj(obj) -> Event:
    eid = obj["id"]
    if not isinstance(eid, int) or isinstance(eid, bool) or eid < 0:
        raise ValueError("id must be an unsigned integer")
    raw = obj["views"]
    if len(raw) != N_VIEWS:
        raise ValueError(f"expected {N_VIEWS} views, got {len(raw)}")
    views = []
    for j, hits in enumerate(raw):
        if not hits:
            views.append(View.empty(j))
            continue
        coords, values, sem, ins = [], [], [], []
        for h in hits:
            c = h["c"]
            if len(c) != 2:
                raise ValueError("coordinate must have 2 components")
            coords.append((float(c[0]), float(c[1])))
            values.append(float(h["v"]))
            for key, dest in (("s", sem), ("p", ins)):
                lab = h[key]
                if not isinstance(lab, int) or isinstance(lab, bool):
                    raise ValueError(f"label {key!r} must be an integer")
                dest.append(lab)
        views.append(View(j, coords, values, sem, ins))
    return Event(eid, tuple(views))


def _parse_header(line: str) -> DatasetHeader:
    try:
        obj = json.loads(line)
        version = obj["format_version"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedRecord(1, f"bad header ({exc})") from None
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format_version {version!r}")
    try:
        header = DatasetHeader(
            n_events=int(obj["n_events"]),
            n_classes=int(obj["n_classes"]),
            p_max=int(obj["p_max"]),
            grid_shape=tuple(int(g) for g in obj["grid"]),
            format_version=version,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(1, f"bad header ({exc})") from None
    if header.n_classes < 2 or header.p_max < 1 or header.n_events < 0:
        raise MalformedRecord(1, "header values out of range")
    if header.grid_shape != GRID_SHAPE:
        raise MalformedRecord(1, f"unsupported grid {header.grid_shape}")
    return header


def iter_dataset(path) -> tuple[DatasetHeader, Iterator[Event]]:
    """Open an event file and stream its events lazily."""
    fh = open(path, "r", encoding="utf-8")
    first = fh.readline()
    if not first.strip():
        fh.close()
        raise MalformedRecord(1, "missing header")
    try:
        header = _parse_header(first)
    except Exception:
        fh.close()
        raise

    def gen():
        count = 0
        with fh:
            for line_no, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    event = _event_from_obj(json.loads(line))
                except (ValueError, KeyError, TypeError, IndexError) as exc:
                    raise MalformedRecord(line_no, str(exc)) from None
                bad = validate_event(event, header.n_classes, header.p_max)
                if bad:
                    v = bad[0]
                    raise MalformedRecord(line_no, f"{v.kind} at {v.location} {v.detail}".strip())
                count += 1
                yield event
        if count != header.n_events:
            raise MalformedRecord(line_no if count else 1, f"header declares {header.n_events} events, found {count}")

    return header, gen()


def read_dataset(path) -> tuple[DatasetHeader, list[Event]]:
    header, it = iter_dataset(path)
    return header, list(it)


def read_events(path) -> list[Event]:
    return read_dataset(path)[1]


def write_events(events: Sequence[Event], path, n_classes: int = N_CLASSES, p_max: int = P_MAX) -> DatasetHeader:
    events = list(events)
    for ev in events:
        bad = validate_event(ev, n_classes, p_max)
        if bad:
            raise ValueError(f"refusing to write invalid event {ev.event_id}: {bad[0]}")
    header = DatasetHeader(n_events=len(events), n_classes=n_classes, p_max=p_max)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header.to_json() + "\n")
        for ev in events:
            fh.write(_event_to_json(ev) + "\n")
    return header


# ---------------------------------------------------------------------------
# dense conversion


def densify(event: Event) -> np.ndarray:
    """Dense ``(2, 80, 100)`` image; hits sharing a cell are summed."""
    out = np.zeros((N_VIEWS,) + GRID_SHAPE)
    for j, view in enumerate(event.views):
        if not len(view):
            continue
        cells = np.floor(view.coords).astype(np.int64)
        np.add.at(out[j], (cells[:, 0], cells[:, 1]), view.values)
    return out
