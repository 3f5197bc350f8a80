"""Labelled synthetic two-view events.

Each prong is a 3D trajectory sampled plane by plane and projected onto
both views, so a prong occupies the same planes in XZ and YZ.  Classes
differ in length, deposit size, straightness and shower width.

Two class pairs, (electron, photon) and (muon, pion), have an
*ambiguous* mode.  In that mode the pair shares every distribution
except a per-view width bit: one hit per plane, or a wide deposit
(a spreading cone for showers, a two-cell strip for tracks) whose
hits are dimmer because the deposit is shared.  Electrons and muons get
the same texture in both views, photons and pions get different ones, and each bit is a fair coin on its own.
A single view therefore carries no information about which member of the
pair produced the prong; the two views together determine it.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEvent
from .events import (
    ELECTRON,
    GRID_SHAPE,
    MUON,
    N_CLASSES,
    OTHER,
    P_MAX,
    PHOTON,
    PION,
    PROTON,
    DatasetHeader,
    Event,
    View,
    write_events,
)

MAX_ATTEMPTS = 100
AMBIGUOUS_PAIRS = {ELECTRON: PHOTON, PHOTON: ELECTRON, MUON: PION, PION: MUON}
# the member of each pair whose two views share the same texture
SAME_TEXTURE = {ELECTRON, MUON}

# Base prong lengths in planes, tuned so the default config averages ~70
# hits per event.  Scaled by hits_per_prong_mean / 23.
_LENGTH = {
    MUON: (9, 15),
    PION: (6, 11),
    PROTON: (3, 6),
    ELECTRON: (4, 7),
    PHOTON: (4, 8),
    OTHER: (2, 4),
}
_LOG_VALUE = {MUON: 0.0, PION: 0.25, PROTON: 1.1, ELECTRON: -0.1, PHOTON: -0.5, OTHER: -0.8}
_VALUE_SIGMA = 0.3

# per-view texture: (spread growth, extra hits per plane, jitter, strip width,
# log-value shift)
_WIDE = (0.9, 0.6, 0.0)
# ambiguous prongs: a bright line, one hit per plane, or a wide deposit whose
# energy is shared among more cells and so reads dimmer per hit
_AMBIG_LINE = (0.0, 0.0, 0.0, 1, 0.4)
_AMBIG_SHOWER_WIDE = (1.0, 1.0, 0.0, 1, -0.4)
_AMBIG_TRACK_WIDE = (0.0, 0.0, 0.0, 2, -0.4)

_AMBIG_SHOWER_LENGTH = (4, 8)
_AMBIG_SHOWER_LOG_VALUE = -0.3
_AMBIG_TRACK_LENGTH = (6, 10)
_AMBIG_TRACK_LOG_VALUE = 0.1


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_prongs_range: tuple = (1, 6)
    hits_per_prong_mean: float = 23.0
    noise_hit_rate: float = 3.0
    class_mixture: tuple = (0.3, 0.3, 0.1, 0.1, 0.1, 0.1)
    cross_view_ambiguity: float = 0.5
    p_max: int = P_MAX

    def __post_init__(self):
        object.__setattr__(self, "n_prongs_range", tuple(int(x) for x in self.n_prongs_range))
        object.__setattr__(self, "class_mixture", tuple(float(x) for x in self.class_mixture))
        lo, hi = self.n_prongs_range
        if not 0 <= lo <= hi:
            raise ValueError("n_prongs_range must be a nonempty range of counts")
        if len(self.class_mixture) != N_CLASSES or min(self.class_mixture) < 0:
            raise ValueError(f"class_mixture needs {N_CLASSES} non-negative weights")
        if abs(sum(self.class_mixture) - 1.0) > 1e-9:
            raise ValueError("class_mixture must sum to 1")
        if not 0.0 <= self.cross_view_ambiguity <= 1.0:
            raise ValueError("cross_view_ambiguity must lie in [0, 1]")
        if self.noise_hit_rate < 0 or self.hits_per_prong_mean <= 0:
            raise ValueError("noise_hit_rate must be >= 0 and hits_per_prong_mean > 0")
        # prongs plus one shared noise instance must fit the slots
        if hi + (1 if self.noise_hit_rate > 0 else 0) > self.p_max:
            raise ValueError("n_prongs_range upper bound leaves no room in p_max slots")


@dataclass(frozen=True)
class ProngSpec:
    class_id: int
    vertex: tuple            # (x, y, z) start of the trajectory
    direction: tuple         # unit 3-vector, z component > 0
    length: float            # 3D path length in plane units
    width_profile: tuple     # per-view (growth, extra hits/plane, jitter[, strip, log-value shift])
    log_value: float
    kink_fraction: float = -1.0          # < 0: no kink
    kink_direction: tuple = field(default=(0.0, 0.0, 1.0))
    ambiguous: bool = False

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        if not self.length > 0:
            raise ValueError("length must be positive")


def _unit(theta, phi):
    return (math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta))


def _textures(rng, cls):
    """Per-view width bits for an ambiguous prong: equal iff cls in SAME_TEXTURE."""
    first = int(rng.integers(2))
    second = first if cls in SAME_TEXTURE else 1 - first
    return first, second


def sample_prong(rng, cls: int, config: GenConfig) -> ProngSpec:
    n_t, n_z = GRID_SHAPE
    scale = config.hits_per_prong_mean / 23.0
    ambiguous = cls in AMBIGUOUS_PAIRS and rng.random() < config.cross_view_ambiguity
    kink = -1.0
    kink_dir = (0.0, 0.0, 1.0)
    if ambiguous and cls in (ELECTRON, PHOTON):
        lo, hi = _AMBIG_SHOWER_LENGTH
        log_value = _AMBIG_SHOWER_LOG_VALUE
        bits = _textures(rng, cls)
        profile = tuple(_AMBIG_SHOWER_WIDE if b else _AMBIG_LINE for b in bits)
    elif ambiguous:
        lo, hi = _AMBIG_TRACK_LENGTH
        log_value = _AMBIG_TRACK_LOG_VALUE
        bits = _textures(rng, cls)
        profile = tuple(_AMBIG_TRACK_WIDE if b else _AMBIG_LINE for b in bits)
        if rng.random() < 0.5:
            kink = float(rng.uniform(0.35, 0.65))
    else:
        lo, hi = _LENGTH[cls]
        log_value = _LOG_VALUE[cls]
        if cls == ELECTRON:
            profile = (_WIDE,) * 2
        elif cls == PHOTON:
            profile = ((0.6, 0.6, 0.0),) * 2
        elif cls == OTHER:
            profile = ((0.8, 0.5, 0.0),) * 2
        elif cls == PION:
            profile = ((0.0, 0.0, 0.3),) * 2
            kink = float(rng.uniform(0.35, 0.65))
        else:
            profile = ((0.0, 0.0, 0.0),) * 2
    planes = rng.uniform(lo, hi + 1) * scale
    theta = rng.uniform(0.0, math.radians(40.0))
    phi = rng.uniform(0.0, 2 * math.pi)
    direction = _unit(theta, phi)
    if kink >= 0:
        kink_dir = _unit(rng.uniform(math.radians(20), math.radians(45)), rng.uniform(0.0, 2 * math.pi))
    z0 = rng.uniform(0.0, max(1.0, n_z - planes))
    vertex = (rng.uniform(10.0, n_t - 10.0), rng.uniform(10.0, n_t - 10.0), z0)
    return ProngSpec(
        class_id=cls,
        vertex=vertex,
        direction=direction,
        length=planes / direction[2],
        width_profile=profile,
        log_value=log_value,
        kink_fraction=kink,
        kink_direction=kink_dir,
        ambiguous=ambiguous,
    )


def trace_prong(rng, spec: ProngSpec):
    """Hit lists ``[(t, z, value), ...]`` per view.

    The trajectory stops at the first plane where it leaves the grid in
    either view, so both projections cover the same planes.
    """
    n_t, n_z = GRID_SHAPE
    x, y, z = spec.vertex
    dx, dy, dz = spec.direction
    total_planes = spec.length * dz
    kink_at = spec.kink_fraction * total_planes if spec.kink_fraction >= 0 else math.inf
    z_start = int(math.floor(z))
    n_planes = max(1, int(round(total_planes)))
    hits = ([], [])
    pos = [x, y]
    slope = [dx / dz, dy / dz]
    for step in range(n_planes):
        plane = z_start + step
        if plane >= n_z:
            break
        if step >= kink_at:
            kx, ky, kz = spec.kink_direction
            slope = [kx / kz, ky / kz]
            kink_at = math.inf
        if step:
            pos = [pos[0] + slope[0], pos[1] + slope[1]]
        if not (0 <= pos[0] < n_t and 0 <= pos[1] < n_t):
            break
        for j in range(2):
            growth, extra, jitter, strip, shift_log = (*spec.width_profile[j], 1, 0.0)[:5]
            centre = pos[j]
            if growth > 0:
                spread = growth * math.sqrt(step + 1)
                n_hits = 1 + int(rng.poisson(extra * math.sqrt(step + 1)))
                offsets = np.concatenate([[0.0], rng.normal(0.0, spread, n_hits - 1)])
            else:
                # a solid strip of adjacent cells centred on the (jittered) line
                shift = rng.normal(0.0, jitter) if jitter > 0 else 0.0
                offsets = shift + np.arange(strip, dtype=np.float64) - (strip - 1) / 2
            values = rng.lognormal(spec.log_value + shift_log, _VALUE_SIGMA, len(offsets))
            for off, val in zip(offsets, values):
                t = math.floor(centre + off + 0.5)
                if 0 <= t < n_t:
                    hits[j].append((float(t), float(plane), float(val)))
    return hits


def _event_rng(seed: int, event_id: int, attempt: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(event_id), int(attempt)]))


def _planes_consistent(cells, n_real: int) -> bool:
    """Every prong's XZ and YZ plane sets share at least half their union.

    Cell merging can strip a late prong of most of its hits in one view;
    such events are redrawn.
    """
    planes = [[set() for _ in range(n_real)] for _ in range(2)]
    for j in range(2):
        for (_, z), (_, _, p) in cells[j].items():
            if p < n_real:
                planes[j][p].add(z)
    for a, b in zip(*planes):
        union = a | b
        if union and len(a & b) < 0.5 * len(union):
            return False
    return True


def _generate_once(event_id: int, config: GenConfig, rng) -> Event | None:
    n_t, n_z = GRID_SHAPE
    lo, hi = config.n_prongs_range
    n_prongs = int(rng.integers(lo, hi + 1))
    mixture = np.asarray(config.class_mixture)
    cells = ({}, {})  # (t, z) -> [value, sem, ins] ; first deposit owns the labels
    ins_id = 0
    for _ in range(n_prongs):
        cls = int(rng.choice(len(mixture), p=mixture))
        spec = sample_prong(rng, cls, config)
        hits = trace_prong(rng, spec)
        if not hits[0] and not hits[1]:
            continue
        owned = False
        for j in range(2):
            for t, z, v in hits[j]:
                cell = cells[j].get((t, z))
                if cell is None:
                    cells[j][(t, z)] = [v, cls, ins_id]
                    owned = True
                else:
                    cell[0] += v
        if owned:
            ins_id += 1
    n_noise = int(rng.poisson(config.noise_hit_rate)) if config.noise_hit_rate > 0 else 0
    noise_used = False
    for _ in range(n_noise):
        j = int(rng.integers(2))
        key = (float(rng.integers(n_t)), float(rng.integers(n_z)))
        if key in cells[j]:
            continue
        cells[j][key] = [float(rng.lognormal(_LOG_VALUE[OTHER], _VALUE_SIGMA)), OTHER, ins_id]
        noise_used = True
    if noise_used:
        ins_id += 1
    if not cells[0] and not cells[1]:
        return None
    if not _planes_consistent(cells, n_real=ins_id - (1 if noise_used else 0)):
        return None
    views = []
    for j in range(2):
        # canonical order: by plane, then transverse cell
        keys = sorted(cells[j], key=lambda k: (k[1], k[0]))
        if not keys:
            views.append(View.empty(j))
            continue
        views.append(
            View(
                j,
                [k for k in keys],
                [cells[j][k][0] for k in keys],
                [cells[j][k][1] for k in keys],
                [cells[j][k][2] for k in keys],
            )
        )
    return Event(int(event_id), tuple(views))


def generate_event(event_id: int, config: GenConfig, rng_state=None) -> Event:
    """One event, a pure function of ``(config.seed, event_id)``.

    ``rng_state`` may be a ``numpy.random.Generator`` to draw from
    instead of the per-event stream.
    """
    for attempt in range(MAX_ATTEMPTS):
        rng = rng_state if rng_state is not None else _event_rng(config.seed, event_id, attempt)
        event = _generate_once(event_id, config, rng)
        if event is not None:
            return event
    raise DegenerateEvent(f"event {event_id}: no hits inside the grid after {MAX_ATTEMPTS} attempts")


def _gen_chunk(args):
    ids, config = args
    return [generate_event(i, config) for i in ids]


def generate_events(n_events: int, config: GenConfig, workers: int = 1, first_id: int = 0) -> list[Event]:
    ids = list(range(first_id, first_id + n_events))
    if workers <= 1 or n_events < 2:
        return [generate_event(i, config) for i in ids]
    chunks = [ids[k::workers] for k in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_gen_chunk, [(c, config) for c in chunks]))
    events = [ev for part in parts for ev in part]
    events.sort(key=lambda e: e.event_id)
    return events


def generate_dataset(n_events: int, config: GenConfig, out_path, workers: int = 1, first_id: int = 0) -> DatasetHeader:
    if n_events < 0:
        raise ValueError("n_events must be >= 0")
    events = generate_events(n_events, config, workers, first_id)
    return write_events(events, out_path, N_CLASSES, config.p_max)
