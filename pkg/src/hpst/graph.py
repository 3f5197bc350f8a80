"""Neighbour graphs and voxel grouping over hit coordinates.

All searches are exhaustive O(n^2) scans with fully specified tie rules,
so the results are deterministic and independent of evaluation order.
Coordinates are ``(transverse, plane)``; only the plane axis is shared
between the two views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K_NN = 8


@dataclass(frozen=True)
class EdgeSet:
    """Directed neighbour lists ``src_view -> dst_view``.

    ``neighbors[k]`` holds the source indices feeding destination point
    ``k``, nearest first.  ``src``/``dst`` are the same edges flattened
    in destination-major order, which is the layout the attention
    kernels consume.
    """

    src_view: int
    dst_view: int
    k_nn: int
    neighbors: tuple
    src: np.ndarray
    dst: np.ndarray

    @classmethod
    def from_lists(cls, src_view, dst_view, k_nn, lists) -> "EdgeSet":
        lists = tuple(np.asarray(x, dtype=np.int64) for x in lists)
        if lists:
            src = np.concatenate(lists)
            dst = np.repeat(np.arange(len(lists)), [len(x) for x in lists])
        else:
            src = np.zeros(0, np.int64)
            dst = np.zeros(0, np.int64)
        return cls(src_view, dst_view, k_nn, lists, src, dst.astype(np.int64))

    @property
    def n_dst(self) -> int:
        return len(self.neighbors)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def _coords(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, 2)


def knn_intra(coords, k_nn: int = DEFAULT_K_NN, view: int = 0) -> EdgeSet:
    """k nearest other points by Euclidean distance; ties -> lower index."""
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    x = _coords(coords)
    n = len(x)
    if n == 0:
        return EdgeSet.from_lists(view, view, k_nn, [])
    diff = x[:, None, :] - x[None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps the lower index first among equal distances
    order = np.argsort(d2, axis=1, kind="stable")[:, : min(k_nn, n - 1)]
    return EdgeSet.from_lists(view, view, k_nn, list(order))


def inter_distance(src_coords, dst_coords) -> np.ndarray:
    """``|delta plane|`` between every (dst, src) pair, shape ``(n_dst, n_src)``."""
    s, d = _coords(src_coords), _coords(dst_coords)
    return np.abs(d[:, None, 1] - s[None, :, 1])


def knn_inter(src_coords, dst_coords, k_nn: int = DEFAULT_K_NN, src_view: int = 1, dst_view: int = 0) -> EdgeSet:
    """For each destination point, the ``k_nn`` source-view points nearest in plane.

    Ties on ``|delta plane|`` fall back to ``|delta transverse|`` and then to
    the lower source index.
    """
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    s, d = _coords(src_coords), _coords(dst_coords)
    if len(s) == 0:
        return EdgeSet.from_lists(src_view, dst_view, k_nn, [np.zeros(0, np.int64)] * len(d))
    dz = np.abs(d[:, None, 1] - s[None, :, 1])
    dt = np.abs(d[:, None, 0] - s[None, :, 0])
    idx = np.broadcast_to(np.arange(len(s)), dz.shape)
    lists = []
    kk = min(k_nn, len(s))
    for row in range(len(d)):
        order = np.lexsort((idx[row], dt[row], dz[row]))
        lists.append(order[:kk])
    return EdgeSet.from_lists(src_view, dst_view, k_nn, lists)


@dataclass(frozen=True)
class VoxelAssignment:
    """Partition of points into occupied grid cells.

    Groups are ordered by cell index (lexicographic), members within a
    group by ascending point index.
    """

    voxel_size: float
    cells: np.ndarray          # (G, 2) integer cell index per group
    group_of: np.ndarray       # (n,) group index per input point
    groups: tuple              # member indices per group
    barycenters: np.ndarray    # (G, 2)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.int64)


def voxel_assign(coords, voxel_size: float) -> VoxelAssignment:
    if not voxel_size > 0:
        raise ValueError("voxel_size must be > 0")
    x = _coords(coords)
    n = len(x)
    if n == 0:
        return VoxelAssignment(float(voxel_size), np.zeros((0, 2), np.int64), np.zeros(0, np.int64), (), np.zeros((0, 2)))
    cell = np.floor(x / voxel_size).astype(np.int64)
    uniq, group_of = np.unique(cell, axis=0, return_inverse=True)
    group_of = group_of.reshape(-1)
    order = np.argsort(group_of, kind="stable")
    bounds = np.searchsorted(group_of[order], np.arange(len(uniq) + 1))
    groups = tuple(order[bounds[g] : bounds[g + 1]] for g in range(len(uniq)))
    bary = np.array([x[g].mean(axis=0) for g in groups])
    return VoxelAssignment(float(voxel_size), uniq, group_of, groups, bary)
