"""Uniform-grid exact k-nearest-neighbour engine (numba).

Points are bucketed into a dense 3D grid of cubic cells sorted by cell id.
A query gathers every point lying in a cell whose box is within a trial
radius ``R`` of the query; if fewer than ``K`` of those are within ``R`` the
radius grows and the gather repeats.  Once at least ``K`` candidates lie
within ``R`` the candidate set provably contains every point at distance
``<= R``, so the K-th distance and all of its ties are present and the
selection is exact (ties resolved by ascending point index).

Squared distances are evaluated as ``dx*dx + dy*dy + dz*dz`` in float64, the
same expression the brute-force oracle uses, which makes results
bit-identical to it.
"""

from __future__ import annotations

import numpy as np
import numba
from numba import njit, prange

# the bundled TBB is too old for numba and triggers a warning on first use
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

MAX_CELLS = 1 << 24
_SLACK = 1e-9


class Grid:
    """Cell bucketing of an ``(N, 3)`` float64 array."""

    def __init__(self, points: np.ndarray, target_per_cell: float):
        n = points.shape[0]
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        extent = hi - lo
        scale = max(float(extent.max()), 1e-12)
        extent = np.maximum(extent, scale * 1e-6)

        h = (float(np.prod(extent)) * target_per_cell / n) ** (1.0 / 3.0)
        h = max(h, scale * 1e-6)
        # occupancy on 2.5D scans is far above the volumetric estimate; refine
        for _ in range(6):
            dims, cid = _cell_ids(points, lo, h, extent)
            occupied = np.unique(cid).size
            per_cell = n / occupied
            if 0.5 * target_per_cell <= per_cell <= 2.0 * target_per_cell:
                break
            new_h = h * (target_per_cell / per_cell) ** 0.5
            if int(np.prod(np.maximum(np.ceil(extent / new_h), 1))) > MAX_CELLS:
                break
            h = new_h
        while int(np.prod(np.maximum(np.ceil(extent / h), 1))) > MAX_CELLS:
            h *= 1.26
        dims, cid = _cell_ids(points, lo, h, extent)

        order = np.argsort(cid, kind="stable")
        self.points = points
        self.lo = lo.astype(np.float64)
        self.h = float(h)
        self.dims = dims
        self.order = order.astype(np.int64)
        self.starts = np.searchsorted(cid[order], np.arange(int(np.prod(dims)) + 1)).astype(np.int64)
        # queries in cell order keep consecutive radii close
        self.query_order = order
        self.radius0 = self.h * 1.5

    def query(self, queries: np.ndarray, exclude: np.ndarray, k: int, *, sort: bool = True):
        """Exact ``k`` nearest for each query row; returns ``(indices, sqdist)``.

        ``exclude[q]`` is a point id skipped for query ``q`` (``-1`` for none).
        Rows are sorted by ``(sqdist, index)`` when ``sort`` is set, otherwise
        they hold the exact neighbour set in unspecified order.
        """
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        exclude = np.ascontiguousarray(exclude, dtype=np.int64)
        return _knn_batch(
            self.points, self.order, self.starts, self.dims, self.lo, self.h,
            queries, exclude, int(k), self.radius0, sort,
        )


def _cell_ids(points, lo, h, extent):
    dims = np.maximum(np.ceil(extent / h).astype(np.int64), 1)
    c = np.floor((points - lo) / h).astype(np.int64)
    np.clip(c, 0, dims - 1, out=c)
    cid = (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]
    return dims, cid


@njit(cache=True)
def _gather(points, order, starts, dims, lo, h, q, skip, radius, bd, bi):
    """Collect into ``bd/bi`` every point within ``radius`` of ``q``.

    Returns the count, or ``-1`` on buffer overflow.  Cells are pruned by
    their box distance, padded slightly so rounding in the cell assignment
    can never drop a point.
    """
    reach = radius * (1.0 + _SLACK) + h * _SLACK
    reach2 = reach * reach
    r2 = radius * radius
    q0 = q[0]
    q1 = q[1]
    q2 = q[2]
    lo_c = np.empty(3, np.int64)
    hi_c = np.empty(3, np.int64)
    for ax in range(3):
        a = int(np.floor((q[ax] - reach - lo[ax]) / h))
        b = int(np.floor((q[ax] + reach - lo[ax]) / h))
        lo_c[ax] = min(max(a, 0), dims[ax] - 1)
        hi_c[ax] = min(max(b, 0), dims[ax] - 1)
    n = 0
    cap = bd.shape[0]
    for ix in range(lo_c[0], hi_c[0] + 1):
        x0 = lo[0] + ix * h
        gx = max(x0 - q0, q0 - (x0 + h), 0.0)
        gx2 = gx * gx
        if gx2 > reach2:
            continue
        for iy in range(lo_c[1], hi_c[1] + 1):
            y0 = lo[1] + iy * h
            gy = max(y0 - q1, q1 - (y0 + h), 0.0)
            gxy2 = gx2 + gy * gy
            if gxy2 > reach2:
                continue
            base = (ix * dims[1] + iy) * dims[2]
            for iz in range(lo_c[2], hi_c[2] + 1):
                c = base + iz
                s = starts[c]
                e = starts[c + 1]
                if s == e:
                    continue
                z0 = lo[2] + iz * h
                gz = max(z0 - q2, q2 - (z0 + h), 0.0)
                if gxy2 + gz * gz > reach2:
                    continue
                for t in range(s, e):
                    j = order[t]
                    dx = points[j, 0] - q0
                    dy = points[j, 1] - q1
                    dz = points[j, 2] - q2
                    d = dx * dx + dy * dy + dz * dz
                    if d <= r2 and j != skip:
                        if n == cap:
                            return -1
                        bd[n] = d
                        bi[n] = j
                        n += 1
    return n


@njit(cache=True)
def _select(bd, bi, n, k, out_i, out_d, sort):
    kth = np.partition(bd[:n], k - 1)[k - 1]
    m = 0
    for t in range(n):
        if bd[t] < kth:
            out_d[m] = bd[t]
            out_i[m] = bi[t]
            m += 1
    need = k - m
    if need > 0:
        ties = np.empty(n - m, np.int64)
        nt = 0
        for t in range(n):
            if bd[t] == kth:
                ties[nt] = bi[t]
                nt += 1
        ties = np.sort(ties[:nt])
        for t in range(need):
            out_d[m + t] = kth
            out_i[m + t] = ties[t]
    if sort and k > 1:
        o = np.argsort(out_d)
        sd = out_d[o]
        si = out_i[o]
        t = 0
        while t < k:
            u = t + 1
            while u < k and sd[u] == sd[t]:
                u += 1
            if u - t > 1:
                si[t:u] = np.sort(si[t:u])
            t = u
        out_d[:] = sd
        out_i[:] = si


@njit(parallel=True, cache=True)
def _knn_batch(points, order, starts, dims, lo, h, queries, exclude, k, radius0, sort):
    nq = queries.shape[0]
    out_i = np.empty((nq, k), np.int64)
    out_d = np.empty((nq, k), np.float64)
    if k == 0:
        return out_i, out_d
    span = 0.0
    for ax in range(3):
        span += (dims[ax] * h) ** 2
    max_radius = 4.0 * np.sqrt(span) + 4.0 * h
    block = 32
    nblocks = (nq + block - 1) // block
    for b in prange(nblocks):
        cap = 2 * k + 256
        bd = np.empty(cap, np.float64)
        bi = np.empty(cap, np.int64)
        radius = radius0
        for qn in range(b * block, min(nq, (b + 1) * block)):
            q = queries[qn]
            n = 0
            while True:
                n = _gather(points, order, starts, dims, lo, h, q, exclude[qn], radius, bd, bi)
                if n < 0:
                    cap *= 2
                    bd = np.empty(cap, np.float64)
                    bi = np.empty(cap, np.int64)
                    continue
                if n >= k or radius > max_radius:
                    break
                grow = 2.0 if n == 0 else max(1.25, (k / n) ** 0.5 * 1.1)
                radius = radius * grow
            if n < k:
                # fewer eligible points than k; callers validate k beforehand
                out_i[qn, :] = -1
                out_d[qn, :] = -1.0
                radius = radius0
                continue
            _select(bd, bi, n, k, out_i[qn], out_d[qn], sort)
            # next query is spatially adjacent; start just above this K-th radius
            radius = np.sqrt(out_d[qn].max()) * 1.05 + h * 1e-3
    return out_i, out_d


@njit(parallel=True, cache=True)
def row_distance_sums(values, query_ids, rows):
    """``out[q] = sum_k ||values[query_ids[q]] - values[rows[q, k]]||``.

    Terms are added in ascending neighbour-index order so the float result
    does not depend on how a row happens to be ordered.
    """
    nq, k = rows.shape
    d = values.shape[1]
    out = np.zeros(nq, np.float64)
    for q in prange(nq):
        i = query_ids[q]
        row = np.sort(rows[q])
        total = 0.0
        for t in range(k):
            j = row[t]
            s = 0.0
            for c in range(d):
                diff = values[i, c] - values[j, c]
                s += diff * diff
            total += np.sqrt(s)
        out[q] = total
    return out
