"""Heterogeneous point set transformer over two-view hit clouds.

The network is a UNet over per-view point sets.  Every block mixes
information within a view (neighbour attention with a relative position
term) and across views (attention along the shared plane axis with
direction-specific projections).  Pooling groups points into voxels per
view; unpooling broadcasts coarse features back onto the points they
came from and merges them with a skip snapshot.

Both views are processed in one concatenated point array (view 0 rows
first).  Intra-view edges never cross the view boundary and pooling
groups never mix views, so the layout is purely an implementation
convenience.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigMismatch, RecordMismatch, ShapeMismatch
from .events import GRID_SHAPE, Event
from .graph import EdgeSet, VoxelAssignment, knn_inter, knn_intra, voxel_assign

RPE_SCALE = 10.0  # grid units per unit of RPE input
N_INPUTS = 3      # transverse, plane, value


@dataclass(frozen=True)
class HyperParams:
    n: int = 2                   # half depth; the UNet has 2n stages
    m: int = 1                   # blocks per stage
    base_dim: int = 32
    k_nn: int = 8
    base_voxel_size: float = 2.0
    n_classes: int = 6
    instance_slots: int = 8
    inter_view: bool = True

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if self.base_dim < 2 or self.base_dim % 2:
            raise ValueError("base_dim must be even and >= 2")
        if self.k_nn < 1 or not self.base_voxel_size > 0:
            raise ValueError("k_nn must be >= 1 and base_voxel_size > 0")
        if self.n_classes < 2 or self.instance_slots < 1:
            raise ValueError("need n_classes >= 2 and instance_slots >= 1")

    def width(self, stage: int) -> int:
        """Feature width of encoder stage ``stage`` (decoder stage ``t`` uses ``width(n-1-t)``)."""
        return self.base_dim * 2**stage

    def voxel_size(self, step: int) -> float:
        return self.base_voxel_size * 2**step

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.type in ("int", int):
                kw[f.name] = int(v)
            elif f.type in ("bool", bool):
                kw[f.name] = bool(v)
            else:
                kw[f.name] = float(v)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigMismatch(f"unknown hyperparameters {sorted(unknown)}")
        return cls(**kw)


# ---------------------------------------------------------------------------
# parameters


def _linear_shapes(prefix, d_in, d_out):
    return {f"{prefix}/weight": (d_in, d_out), f"{prefix}/bias": (d_out,)}


def _attention_shapes(prefix, d, out_bias=True):
    # a key bias or a final RPE bias shifts every logit of a destination
    # equally, so softmax cancels it; those biases are left out
    s = {}
    for role in ("q_proj", "k_proj", "v_proj", "o_proj"):
        s.update(_linear_shapes(f"{prefix}/{role}", d, d))
    del s[f"{prefix}/k_proj/bias"]
    if not out_bias:
        del s[f"{prefix}/o_proj/bias"]
    return s


def _block_shapes(prefix, d, inter):
    s = {
        f"{prefix}/ln_attn/gain": (d,),
        f"{prefix}/ln_attn/shift": (d,),
    }
    s.update(_attention_shapes(f"{prefix}/intra", d))
    s.update(_linear_shapes(f"{prefix}/intra/rpe_fc1", 2, d))
    s[f"{prefix}/intra/rpe_fc2/weight"] = (d, 1)
    if inter:
        for pair in ("inter_1to0", "inter_0to1"):
            # no output bias: a view with no cross-view neighbours receives exactly zero
            s.update(_attention_shapes(f"{prefix}/{pair}", d, out_bias=False))
    s[f"{prefix}/ln_mlp/gain"] = (d,)
    s[f"{prefix}/ln_mlp/shift"] = (d,)
    s.update(_linear_shapes(f"{prefix}/mlp/fc1", d, 2 * d))
    s.update(_linear_shapes(f"{prefix}/mlp/fc2", 2 * d, d))
    return s


def param_shapes(hyper: HyperParams) -> dict:
    """Ordered map of parameter path -> shape."""
    shapes = {}
    shapes.update(_linear_shapes("embed", N_INPUTS, hyper.base_dim))
    for s in range(hyper.n):
        d = hyper.width(s)
        for b in range(hyper.m):
            shapes.update(_block_shapes(f"enc{s}/blk{b}", d, hyper.inter_view))
        shapes.update(_linear_shapes(f"enc{s}/down", d, 2 * d))
    for t in range(hyper.n):
        d = hyper.width(hyper.n - 1 - t)
        shapes.update(_linear_shapes(f"dec{t}/up", 3 * d, d))
        for b in range(hyper.m):
            shapes.update(_block_shapes(f"dec{t}/blk{b}", d, hyper.inter_view))
    shapes.update(_linear_shapes("sem_head", hyper.base_dim, hyper.n_classes))
    shapes.update(_linear_shapes("ins_head", hyper.base_dim, hyper.instance_slots))
    return shapes


def init_weights(hyper: HyperParams, seed: int = 0) -> dict:
    """Glorot-uniform matrices, zero biases/shifts, unit gains."""
    rng = np.random.default_rng(seed)
    weights = {}
    for path, shape in param_shapes(hyper).items():
        leaf = path.rsplit("/", 1)[1]
        if leaf == "weight":
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-lim, lim, size=shape)
        elif leaf == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        weights[path] = Tensor(data, requires_grad=True)
    return weights


def n_parameters(weights: dict) -> int:
    return int(sum(t.data.size for t in weights.values()))


def check_weights(weights: dict, hyper: HyperParams):
    expected = param_shapes(hyper)
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ConfigMismatch(f"weights do not match hyperparameters (missing {missing[:3]}, extra {extra[:3]})")
    for path, shape in expected.items():
        if weights[path].shape != tuple(shape):
            raise ConfigMismatch(f"{path}: shape {weights[path].shape}, expected {shape}")


class _Scope:
    """Read-only view of the weight dict under a path prefix."""

    __slots__ = ("w", "prefix")

    def __init__(self, w, prefix):
        self.w = w
        self.prefix = prefix

    def _k(self, key):
        return f"{self.prefix}/{key}" if self.prefix else key

    def __getitem__(self, key):
        return self.w[self._k(key)]

    def sub(self, key):
        return _Scope(self.w, self._k(key))

    def lin(self, x, key):
        w = self.w[self._k(key + "/weight")]
        b = self.w.get(self._k(key + "/bias"))
        if b is None:
            b = Tensor(np.zeros(w.shape[1]))
        return dc.linear(x, w, b)

    def has(self, key):
        return self._k(key + "/weight") in self.w


def scope(weights, prefix) -> _Scope:
    return _Scope(weights, prefix)


# ---------------------------------------------------------------------------
# geometry precomputed per event


@dataclass
class PoolRecord:
    """Everything needed to undo one pooling step.

    ``group_of`` maps every pre-pool point to its pooled point; ``skip``
    is the pre-pool feature snapshot consumed by :func:`unpool`.
    """

    assignment: object          # VoxelAssignment, or a per-view tuple of them
    pre_coords: np.ndarray
    group_of: np.ndarray
    counts: np.ndarray
    skip: Optional[Tensor] = None

    @property
    def n_pre(self) -> int:
        return len(self.group_of)

    @property
    def n_post(self) -> int:
        return len(self.counts)


@dataclass
class Level:
    """Points of both views at one resolution, plus their edge sets."""

    coords: np.ndarray      # (N, 2), view 0 rows then view 1 rows
    n_view: tuple           # (K_0, K_1)
    intra: Optional[EdgeSet] = None         # combined indices
    rpe_in: Optional[np.ndarray] = None     # (E, 2) scaled coordinate deltas
    inter: Optional[dict] = None            # (src_view, dst_view) -> EdgeSet in view-local indices

    def rows(self, view: int) -> np.ndarray:
        start = 0 if view == 0 else self.n_view[0]
        return np.arange(start, start + self.n_view[view])

    def view_coords(self, view: int) -> np.ndarray:
        return self.coords[self.rows(view)]


@dataclass
class Structure:
    levels: list
    pools: list


def _merge_intra(per_view: list, offsets) -> EdgeSet:
    lists = []
    for es, off in zip(per_view, offsets):
        lists.extend(nb + off for nb in es.neighbors)
    return EdgeSet.from_lists(-1, -1, per_view[0].k_nn, lists)


def rpe_input(coords: np.ndarray, edges: EdgeSet) -> np.ndarray:
    return (coords[edges.dst] - coords[edges.src]) / RPE_SCALE


def _make_level(view_coords: list, k_nn: int, with_edges: bool) -> Level:
    coords = np.concatenate([np.asarray(c, np.float64).reshape(-1, 2) for c in view_coords], axis=0)
    lvl = Level(coords, tuple(len(c) for c in view_coords))
    if with_edges:
        per_view = [knn_intra(c, k_nn, view=j) for j, c in enumerate(view_coords)]
        lvl.intra = _merge_intra(per_view, (0, lvl.n_view[0]))
        lvl.rpe_in = rpe_input(coords, lvl.intra)
        lvl.inter = {
            (1, 0): knn_inter(view_coords[1], view_coords[0], k_nn, src_view=1, dst_view=0),
            (0, 1): knn_inter(view_coords[0], view_coords[1], k_nn, src_view=0, dst_view=1),
        }
    return lvl


def build_structure(view_coords, hyper: HyperParams) -> Structure:
    """Edges at every resolution and the pooling maps between them.

    Edge sets are rebuilt on the pooled barycentres after every pooling
    step.  The coarsest level carries no blocks and therefore no edges.
    """
    cur = [np.asarray(c, np.float64).reshape(-1, 2) for c in view_coords]
    levels, pools = [], []
    for step in range(hyper.n + 1):
        levels.append(_make_level(cur, hyper.k_nn, with_edges=step < hyper.n))
        if step == hyper.n:
            break
        size = hyper.voxel_size(step)
        assigns = [voxel_assign(c, size) for c in cur]
        offset_pre, offset_post = 0, 0
        group_of, counts = [], []
        for a, c in zip(assigns, cur):
            group_of.append(a.group_of + offset_post)
            counts.append(a.counts)
            offset_pre += len(c)
            offset_post += a.n_groups
        pools.append(
            PoolRecord(
                assignment=tuple(assigns),
                pre_coords=levels[-1].coords,
                group_of=np.concatenate(group_of).astype(np.int64),
                counts=np.concatenate(counts).astype(np.int64),
            )
        )
        cur = [a.barycenters for a in assigns]
    return Structure(levels, pools)


def event_structure(event: Event, hyper: HyperParams) -> Structure:
    return build_structure([v.coords for v in event.views], hyper)


def event_inputs(event: Event) -> list:
    """Per-view ``(K, 3)`` input rows: scaled coordinates and raw value."""
    out = []
    n_t, n_z = GRID_SHAPE
    for view in event.views:
        x = np.empty((len(view), N_INPUTS))
        x[:, 0] = view.coords[:, 0] / n_t
        x[:, 1] = view.coords[:, 1] / n_z
        x[:, 2] = view.values
        out.append(x)
    return out


# ---------------------------------------------------------------------------
# layers


def intra_attention(features: Tensor, coords, edges: EdgeSet, weights, rpe_in=None) -> Tensor:
    """Neighbour attention inside one point set.

    Logit for edge ``k' -> k`` is ``q_k . k_k' / sqrt(d) + r(x_k - x_k')``
    with ``r`` a two-layer MLP on the coordinate difference.  Returns the
    attention-weighted sum of neighbour values (before any output
    projection); points without neighbours get zeros.
    """
    w = weights if isinstance(weights, _Scope) else scope(weights, "")
    n, d = features.shape
    if rpe_in is None:
        rpe_in = rpe_input(np.asarray(coords, np.float64).reshape(-1, 2), edges)
    q = w.lin(features, "q_proj")
    k = w.lin(features, "k_proj")
    v = w.lin(features, "v_proj")
    logit = dc.scale(dc.rowdot(dc.gather(q, edges.dst), dc.gather(k, edges.src)), 1.0 / math.sqrt(d))
    r = w.lin(dc.relu(w.lin(Tensor(rpe_in), "rpe_fc1")), "rpe_fc2")
    logit = dc.add(logit, dc.reshape(r, (-1,)))
    alpha = dc.segment_softmax(logit, edges.dst, n)
    return dc.segment_sum(dc.scale_rows(dc.gather(v, edges.src), alpha), edges.dst, n)


def inter_attention(dst_features: Tensor, src_features: Tensor, edges: EdgeSet, weights) -> Tensor:
    """Cross-view attention ``src view -> dst view``; plain scaled dot product, no position term."""
    w = weights if isinstance(weights, _Scope) else scope(weights, "")
    n_dst, d = dst_features.shape
    if src_features.shape[1] != d:
        raise ShapeMismatch(f"inter_attention: widths {d} and {src_features.shape[1]}")
    if edges.n_dst != n_dst:
        raise ShapeMismatch("inter_attention: edge set built for a different destination view")
    q = w.lin(dst_features, "q_proj")
    k = w.lin(src_features, "k_proj")
    v = w.lin(src_features, "v_proj")
    logit = dc.scale(dc.rowdot(dc.gather(q, edges.dst), dc.gather(k, edges.src)), 1.0 / math.sqrt(d))
    alpha = dc.segment_softmax(logit, edges.dst, n_dst)
    return dc.segment_sum(dc.scale_rows(dc.gather(v, edges.src), alpha), edges.dst, n_dst)


def block_forward(h: Tensor, level: Level, weights, use_inter: bool = True) -> Tensor:
    """One pre-norm residual block over both views.

    ``h <- h + intra(LN h) + inter(LN h)`` with both attention paths
    reading the same normalised input, then ``h <- h + MLP(LN h)``.
    """
    w = weights if isinstance(weights, _Scope) else scope(weights, "")
    hn = dc.layer_norm(h, w["ln_attn/gain"], w["ln_attn/shift"])
    a = intra_attention(hn, level.coords, level.intra, w.sub("intra"), level.rpe_in)
    h = dc.add(h, w.lin(a, "intra/o_proj"))
    if use_inter and w.has("inter_1to0/q_proj"):
        parts = []
        for dst, src in ((0, 1), (1, 0)):
            pw = w.sub(f"inter_{src}to{dst}")
            dst_f = dc.gather(hn, level.rows(dst))
            src_f = dc.gather(hn, level.rows(src))
            o = inter_attention(dst_f, src_f, level.inter[(src, dst)], pw)
            parts.append(pw.lin(o, "o_proj"))
        h = dc.add(h, dc.concat(parts, axis=0))
    hn = dc.layer_norm(h, w["ln_mlp/gain"], w["ln_mlp/shift"])
    return dc.add(h, w.lin(dc.relu(w.lin(hn, "mlp/fc1")), "mlp/fc2"))


def pool_features(features: Tensor, group_of, counts) -> Tensor:
    """Unweighted mean of the member rows of every group."""
    counts = np.asarray(counts)
    summed = dc.segment_sum(features, group_of, len(counts))
    return dc.scale_rows(summed, Tensor(1.0 / np.maximum(counts, 1)))


def voxel_pool(coords, features: Tensor, voxel_size: float):
    """Pool one view's points into voxels.

    Returns ``(barycentres, mean features, PoolRecord)``; the record holds
    the incoming features as its skip snapshot.
    """
    assign: VoxelAssignment = voxel_assign(coords, voxel_size)
    rec = PoolRecord(
        assignment=assign,
        pre_coords=np.asarray(coords, np.float64).reshape(-1, 2),
        group_of=assign.group_of,
        counts=assign.counts,
        skip=features,
    )
    return assign.barycenters, pool_features(features, assign.group_of, assign.counts), rec


def unpool(pooled: Tensor, record: PoolRecord, weights, skip: Optional[Tensor] = None) -> Tensor:
    """Broadcast pooled rows back to their source points, concat the skip, project.

    ``weights`` is a scope holding ``weight``/``bias`` of the projection
    ``(2d + d) -> d`` (or any width matching the concatenation).
    """
    skip = record.skip if skip is None else skip
    if pooled.shape[0] != record.n_post:
        raise RecordMismatch(f"pooled rows {pooled.shape[0]} != record groups {record.n_post}")
    if skip is None or skip.shape[0] != record.n_pre:
        raise RecordMismatch("skip snapshot does not match the record's pre-pool point count")
    up = dc.gather(pooled, record.group_of)
    w = weights if isinstance(weights, _Scope) else scope(weights, "")
    return dc.linear(dc.concat([up, skip], axis=1), w["weight"], w["bias"])


# ---------------------------------------------------------------------------
# full network


def forward_structured(inputs, structure: Structure, weights: dict, hyper: HyperParams, use_inter=None):
    """Run the UNet on precomputed geometry.

    ``inputs`` holds one ``(K_j, 3)`` array or tensor per view.  Returns
    combined ``(sem_logits, ins_logits)`` tensors with view-0 rows first.
    """
    if use_inter is None:
        use_inter = hyper.inter_view
    x = dc.concat([dc.as_tensor(a) for a in inputs], axis=0)
    if x.shape[0] != structure.levels[0].coords.shape[0]:
        raise ShapeMismatch("inputs do not match the structure's point count")
    h = dc.linear(x, weights["embed/weight"], weights["embed/bias"])
    skips = []
    for s in range(hyper.n):
        lvl = structure.levels[s]
        for b in range(hyper.m):
            h = block_forward(h, lvl, scope(weights, f"enc{s}/blk{b}"), use_inter)
        skips.append(h)
        rec = structure.pools[s]
        h = pool_features(h, rec.group_of, rec.counts)
        h = dc.linear(h, weights[f"enc{s}/down/weight"], weights[f"enc{s}/down/bias"])
    for t in range(hyper.n):
        step = hyper.n - 1 - t
        rec = structure.pools[step]
        h = unpool(h, rec, scope(weights, f"dec{t}/up"), skip=skips[step])
        lvl = structure.levels[step]
        for b in range(hyper.m):
            h = block_forward(h, lvl, scope(weights, f"dec{t}/blk{b}"), use_inter)
    sem = dc.linear(h, weights["sem_head/weight"], weights["sem_head/bias"])
    ins = dc.linear(h, weights["ins_head/weight"], weights["ins_head/bias"])
    return sem, ins


def split_views(t: Tensor, n_view) -> list:
    n0 = n_view[0]
    return [dc.gather(t, np.arange(n0)), dc.gather(t, np.arange(n0, n0 + n_view[1]))]


def forward(event: Event, weights: dict, hyper: HyperParams, structure: Optional[Structure] = None, use_inter=None):
    """Per-view ``(sem_logits, ins_logits)`` lists for one event."""
    if structure is None:
        structure = event_structure(event, hyper)
    sem, ins = forward_structured(event_inputs(event), structure, weights, hyper, use_inter)
    nv = structure.levels[0].n_view
    return split_views(sem, nv), split_views(ins, nv)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(event: Event, weights: dict, hyper: HyperParams, structure: Optional[Structure] = None, use_inter=None):
    """Inference for one event, both views concatenated (view 0 first).

    Returns ``(class probabilities (N, C), instance slot per hit (N,))``.
    """
    if structure is None:
        structure = event_structure(event, hyper)
    sem, ins = forward_structured(event_inputs(event), structure, weights, hyper, use_inter)
    if sem.shape[0] == 0:
        return np.zeros((0, hyper.n_classes)), np.zeros(0, dtype=np.int64)
    return softmax_rows(sem.data), np.argmax(ins.data, axis=1)
