"""Exact 2-D nearest-neighbour index over patch coordinates.

The tree is stored implicitly: ``order`` is a permutation of point indices
such that every subtree occupies a contiguous slice whose middle element is
the splitting point.  Queries return the index (in original input order) of
the point with the smallest squared Euclidean distance; equal distances
resolve to the lowest index.  The brute-force scan uses the same distance
arithmetic so the two paths agree bit for bit.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .exceptions import InputError

LEAF_SIZE = 8


def _as_points(coords):
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 2:
        pts = pts.reshape(1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError(f"coordinates must have shape [n, 2], got {list(pts.shape)}")
    if pts.shape[0] == 0:
        raise InputError("cannot index an empty coordinate list")
    if not np.all(np.isfinite(pts)):
        raise InputError("coordinates contain NaN or Inf")
    return np.ascontiguousarray(pts)


def _as_queries(queries):
    q = np.asarray(queries, dtype=np.float64)
    q = np.ascontiguousarray(q.reshape(-1, 2))
    if not np.all(np.isfinite(q)):
        raise InputError("query contains NaN or Inf")
    return q


def _build(points):
    n = points.shape[0]
    order = np.arange(n, dtype=np.int64)
    axes = np.zeros(n, dtype=np.int8)
    stack = [(0, n)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo <= LEAF_SIZE:
            continue
        idx = order[lo:hi]
        spread = points[idx].max(axis=0) - points[idx].min(axis=0)
        axis = int(spread[1] > spread[0])
        mid = (lo + hi) // 2
        # stable sort keeps equal keys in index order: reproducible layout
        order[lo:hi] = idx[np.argsort(points[idx, axis], kind="stable")]
        axes[mid] = axis
        stack.append((lo, mid))
        stack.append((mid + 1, hi))
    return order, axes


@njit(cache=True)
def _query_many(points, order, axes, queries, leaf_size):
    m = queries.shape[0]
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    stack_lo = np.empty(128, dtype=np.int64)
    stack_hi = np.empty(128, dtype=np.int64)
    stack_bound = np.empty(128, dtype=np.float64)
    for qi in range(m):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        best_d = np.inf
        best_j = n
        top = 0
        stack_lo[0] = 0
        stack_hi[0] = n
        stack_bound[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            lo = stack_lo[top]
            hi = stack_hi[top]
            if stack_bound[top] > best_d:
                continue
            if hi - lo <= leaf_size:
                for t in range(lo, hi):
                    j = order[t]
                    dx = qx - points[j, 0]
                    dy = qy - points[j, 1]
                    d = dx * dx + dy * dy
                    if d < best_d or (d == best_d and j < best_j):
                        best_d = d
                        best_j = j
                continue
            mid = (lo + hi) // 2
            j = order[mid]
            dx = qx - points[j, 0]
            dy = qy - points[j, 1]
            d = dx * dx + dy * dy
            if d < best_d or (d == best_d and j < best_j):
                best_d = d
                best_j = j
            if axes[mid] == 0:
                diff = dx
            else:
                diff = dy
            bound = diff * diff
            # far side first so the near side is popped next
            if diff < 0:
                stack_lo[top] = mid + 1
                stack_hi[top] = hi
                stack_bound[top] = bound
                top += 1
                stack_lo[top] = lo
                stack_hi[top] = mid
                stack_bound[top] = 0.0
                top += 1
            else:
                stack_lo[top] = lo
                stack_hi[top] = mid
                stack_bound[top] = bound
                top += 1
                stack_lo[top] = mid + 1
                stack_hi[top] = hi
                stack_bound[top] = 0.0
                top += 1
        out[qi] = best_j
    return out


@njit(cache=True)
def _scan_many(points, queries):
    m = queries.shape[0]
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    for qi in range(m):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        best_d = np.inf
        best_j = 0
        for j in range(n):
            dx = qx - points[j, 0]
            dy = qy - points[j, 1]
            d = dx * dx + dy * dy
            if d < best_d:
                best_d = d
                best_j = j
        out[qi] = best_j
    return out


class PointIndex:
    """Immutable kd-tree over ``n`` 2-D points."""

    __slots__ = ("_points", "_order", "_axes")

    def __init__(self, coords):
        points = _as_points(coords)
        points.setflags(write=False)
        order, axes = _build(points)
        order.setflags(write=False)
        axes.setflags(write=False)
        self._points = points
        self._order = order
        self._axes = axes

    @property
    def points(self):
        return self._points

    @property
    def count(self):
        return self._points.shape[0]

    def __len__(self):
        return self.count

    def query(self, queries):
        """Nearest point index for each row of an [m, 2] query array."""
        q = _as_queries(queries)
        return _query_many(self._points, self._order, self._axes, q, LEAF_SIZE)

    def nearest(self, query):
        return int(self.query(query)[0])


def build_index(coords):
    return PointIndex(coords)


def nearest(index, query):
    return index.nearest(query)


def nearest_bruteforce(coords, query):
    """Linear-scan reference for :func:`nearest`."""
    pts = _as_points(coords)
    q = _as_queries(query)
    if q.shape[0] != 1:
        raise InputError("nearest_bruteforce takes a single (x, y) query")
    dx = q[0, 0] - pts[:, 0]
    dy = q[0, 1] - pts[:, 1]
    # argmin returns the first minimiser: lowest index on ties
    return int(np.argmin(dx * dx + dy * dy))


def nearest_bruteforce_many(coords, queries):
    """Compiled linear scan for a batch of queries."""
    return _scan_many(_as_points(coords), _as_queries(queries))
