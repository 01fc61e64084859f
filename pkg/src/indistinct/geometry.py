"""Point-cloud container, exact KNN and farthest point sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from ._grid import Grid
from .errors import InputError, ParameterError

EUCLIDEAN = "euclidean"
EIGENVALUE = "eigenvalue"

# rows per chunk when streaming large-K queries (keeps ~chunk*K*16 bytes live)
DEFAULT_CHUNK = 1 << 14


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable point cloud.

    ``positions`` is ``(N, 3)`` float64 in meters, ``colors`` optional
    ``(N, 3)`` uint8, ``gt_labels`` optional ``(N,)`` int64 in ``[0, num_classes)``.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    gt_labels: Optional[np.ndarray] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InputError(f"positions must be N x 3, got shape {pos.shape}")
        if pos.shape[0] < 1:
            raise InputError("point cloud must contain at least one point")
        if not np.isfinite(pos).all():
            bad = int(np.flatnonzero(~np.isfinite(pos).all(axis=1))[0])
            raise InputError(f"non-finite coordinate at point {bad}")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        n = pos.shape[0]

        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != (n, 3):
                raise InputError(f"colors must be {n} x 3, got shape {col.shape}")
            if col.size and (col.min() < 0 or col.max() > 255):
                raise InputError("colors must lie in [0, 255]")
            col = col.astype(np.uint8)
            col.flags.writeable = False
            object.__setattr__(self, "colors", col)

        if self.gt_labels is not None:
            lab = np.asarray(self.gt_labels)
            if lab.shape != (n,):
                raise InputError(f"gt_labels must have length {n}, got shape {lab.shape}")
            lab = lab.astype(np.int64)
            if lab.min() < 0:
                raise InputError("gt_labels must be non-negative")
            c = self.num_classes
            if c is None:
                c = int(lab.max()) + 1
            elif lab.max() >= c:
                raise InputError(f"gt_labels must lie in [0, {c}), found {int(lab.max())}")
            lab.flags.writeable = False
            object.__setattr__(self, "gt_labels", lab)
            object.__setattr__(self, "num_classes", int(c))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    @property
    def has_labels(self) -> bool:
        return self.gt_labels is not None

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.colors is None else self.colors[idx],
            None if self.gt_labels is None else self.gt_labels[idx],
            self.num_classes,
        )

    def properties(self, channels: str = "xyz") -> np.ndarray:
        """Per-point property vectors: ``xyz`` or ``xyzrgb`` (raw 0-255 colors)."""
        if channels == "xyz":
            return self.positions
        if channels == "xyzrgb":
            if self.colors is None:
                raise InputError("xyzrgb channels requested but the cloud has no colors")
            return np.hstack([self.positions, self.colors.astype(np.float64)])
        raise ParameterError(f"unknown property channels '{channels}'")


@dataclass(frozen=True, eq=False)
class NeighborList:
    """Per-point K nearest neighbours, rows sorted by (distance, index)."""

    indices: np.ndarray
    distances: np.ndarray
    space: str = EUCLIDEAN
    self_inclusive: bool = False

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class SampleIndex:
    indices: np.ndarray
    seed_index: int

    def __len__(self) -> int:
        return len(self.indices)


class SpatialIndex:
    """Exact KNN index over an ``(N, 3)`` array of points.

    Grids are built lazily per neighbourhood size; the cell size adapts to K.
    """

    def __init__(self, points: np.ndarray):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InputError(f"index needs an N x 3 array with N >= 1, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise InputError("cannot index non-finite coordinates")
        self.points = pts
        self._grids: dict[int, Grid] = {}

    def __len__(self) -> int:
        return self.points.shape[0]

    def _grid(self, k: int) -> Grid:
        target = max(1.5, k / 40.0)
        key = int(round(math.log2(target) * 2))
        grid = self._grids.get(key)
        if grid is None:
            grid = Grid(self.points, 2.0 ** (key / 2))
            self._grids[key] = grid
        return grid

    def query(self, ids, k: int, *, sort: bool = True):
        """Exact ``k`` nearest other points of the indexed points ``ids``.

        Returns ``(indices, squared_distances)`` of shape ``(len(ids), k)``.
        The query point itself is never returned.
        """
        ids = np.asarray(ids, dtype=np.int64)
        n = len(self)
        if k < 0 or k > n - 1:
            raise ParameterError(f"K={k} out of range: need 0 <= K <= N-1 = {n - 1}")
        if ids.size == 0 or k == 0:
            return np.empty((ids.size, k), np.int64), np.empty((ids.size, k), np.float64)
        grid = self._grid(k)
        # spatially coherent order lets each query seed its radius from the last
        rank = np.empty(n, np.int64)
        rank[grid.query_order] = np.arange(n)
        perm = np.argsort(rank[ids], kind="stable")
        q_ids = ids[perm]
        idx, sqd = grid.query(self.points[q_ids], q_ids, k, sort=sort)
        out_i = np.empty_like(idx)
        out_d = np.empty_like(sqd)
        out_i[perm] = idx
        out_d[perm] = sqd
        return out_i, out_d

    def query_points(self, coords: np.ndarray, k: int, *, sort: bool = True):
        """Exact ``k`` nearest indexed points for arbitrary query coordinates."""
        coords = np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 3)
        n = len(self)
        if k < 0 or k > n:
            raise ParameterError(f"K={k} out of range: need 0 <= K <= N = {n}")
        if coords.shape[0] == 0 or k == 0:
            return np.empty((coords.shape[0], k), np.int64), np.empty((coords.shape[0], k))
        grid = self._grid(k)
        cell = np.floor((coords - grid.lo) / grid.h).astype(np.int64)
        np.clip(cell, 0, grid.dims - 1, out=cell)
        key = (cell[:, 0] * grid.dims[1] + cell[:, 1]) * grid.dims[2] + cell[:, 2]
        perm = np.argsort(key, kind="stable")
        idx, sqd = grid.query(coords[perm], np.full(len(perm), -1, np.int64), k, sort=sort)
        out_i = np.empty_like(idx)
        out_d = np.empty_like(sqd)
        out_i[perm] = idx
        out_d[perm] = sqd
        return out_i, out_d

    def iter_query(self, ids, k: int, *, chunk: int = DEFAULT_CHUNK, sort: bool = False) -> Iterator:
        """Stream ``(ids_chunk, indices, squared_distances)`` for large ``len(ids) * k``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size:
            grid = self._grid(k)
            rank = np.empty(len(self), np.int64)
            rank[grid.query_order] = np.arange(len(self))
            ids = ids[np.argsort(rank[ids], kind="stable")]
        for start in range(0, ids.size, chunk):
            part = ids[start:start + chunk]
            idx, sqd = self.query(part, k, sort=sort)
            yield part, idx, sqd


def _coords(source) -> np.ndarray:
    if isinstance(source, PointCloud):
        return source.positions
    return np.asarray(source, dtype=np.float64)


def build_spatial_index(cloud) -> SpatialIndex:
    """Index a :class:`PointCloud` (or a bare ``(N, 3)`` array)."""
    return SpatialIndex(_coords(cloud))


def _check_k(k: int, n: int, self_inclusive: bool) -> None:
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 1:
        raise ParameterError(f"K must be a positive integer, got {k!r}")
    limit = n if self_inclusive else n - 1
    if k > limit:
        mode = "self-inclusive" if self_inclusive else "self-excluded"
        raise ParameterError(f"K={k} too large for N={n} ({mode} allows at most {limit})")


def _assemble(n, k, self_inclusive, idx, sqd, space) -> NeighborList:
    if self_inclusive:
        own = np.arange(n, dtype=np.int64)[:, None]
        idx = np.hstack([own, idx])
        sqd = np.hstack([np.zeros((n, 1)), sqd])
    return NeighborList(idx, np.sqrt(sqd), space, self_inclusive)


def knn(index: SpatialIndex, k: int, self_inclusive: bool = False, *, space: str = EUCLIDEAN) -> NeighborList:
    """Exact K nearest neighbours of every indexed point.

    Self-inclusive rows always start with the point itself (distance 0) and
    continue with its K-1 nearest *other* points, even when duplicates exist.
    """
    n = len(index)
    _check_k(k, n, self_inclusive)
    others = k - 1 if self_inclusive else k
    idx, sqd = index.query(np.arange(n), others, sort=True)
    return _assemble(n, k, self_inclusive, idx, sqd, space)


def knn_bruteforce(cloud, k: int, self_inclusive: bool = False, *, rows=None,
                   space: str = EUCLIDEAN) -> NeighborList:
    """O(N^2) reference for :func:`knn`; ``rows`` restricts which points are queried."""
    pts = _coords(cloud)
    n = pts.shape[0]
    _check_k(k, n, self_inclusive)
    others = k - 1 if self_inclusive else k
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    out_i = np.empty((rows.size, others), np.int64)
    out_d = np.empty((rows.size, others), np.float64)
    ar = np.arange(n)
    block = max(1, 4_000_000 // max(n, 1))
    for s in range(0, rows.size, block):
        r = rows[s:s + block]
        dx = pts[None, :, 0] - pts[r, None, 0]
        dy = pts[None, :, 1] - pts[r, None, 1]
        dz = pts[None, :, 2] - pts[r, None, 2]
        d = dx * dx + dy * dy + dz * dz
        d[np.arange(r.size), r] = np.inf
        order = np.lexsort((np.broadcast_to(ar, d.shape), d), axis=-1)[:, :others]
        out_i[s:s + block] = order
        out_d[s:s + block] = np.take_along_axis(d, order, axis=1)
    if self_inclusive:
        out_i = np.hstack([rows[:, None], out_i])
        out_d = np.hstack([np.zeros((rows.size, 1)), out_d])
    return NeighborList(out_i, np.sqrt(out_d), space, self_inclusive)


def fps(cloud, m: int, seed_index: int = 0) -> SampleIndex:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = _coords(cloud)
    n = pts.shape[0]
    if not isinstance(m, (int, np.integer)) or m < 1 or m > n:
        raise ParameterError(f"M must satisfy 1 <= M <= N={n}, got {m!r}")
    if not 0 <= seed_index < n:
        raise ParameterError(f"seed_index must lie in [0, {n}), got {seed_index}")
    selected = np.empty(m, np.int64)
    selected[0] = seed_index
    diff = pts - pts[seed_index]
    mind = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
    mind[seed_index] = -1.0
    for t in range(1, m):
        nxt = int(np.argmax(mind))
        selected[t] = nxt
        diff = pts - pts[nxt]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        mind[selected[: t + 1]] = -1.0
    return SampleIndex(selected, int(seed_index))


def fps_hierarchy(cloud, levels: int, ratio: int = 4, seed_index: int = 0) -> list[np.ndarray]:
    """Nested FPS point sets, each ``floor(previous / ratio)`` large.

    Returns one index array per level into the original cloud; level 0 is all
    points in natural order.  Every level starts from the seed point.
    """
    pts = _coords(cloud)
    out = [np.arange(pts.shape[0], dtype=np.int64)]
    for level in range(1, levels):
        prev = out[-1]
        m = len(prev) // ratio
        if m < 1:
            raise ParameterError(f"level {level + 1} would be empty ({len(prev)} points / {ratio})")
        local_seed = int(np.flatnonzero(prev == seed_index)[0]) if level == 1 else 0
        sample = fps(pts[prev], m, local_seed)
        out.append(prev[sample.indices])
    return out
